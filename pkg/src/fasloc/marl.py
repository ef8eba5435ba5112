"""Cooperative Q-learning for trajectory and antenna-port control.

Five agents (one active, four passive UAVs) each run a recurrent local
Q-network over their own observations.  A ground-station side attention
block summarizes the joint recent history into a context vector, and a
hypernetwork mixer folds the five chosen-action Q-values plus that
context into one global Q-value trained against a sign-weighted TD
loss.  Baselines strip individual pieces: plain-sum mixing, independent
learners, random ports, feedforward-only locals, context-free mixing,
and a uniform random policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from . import positioning as pos
from . import world as wd
from .config import ExperimentConfig
from .nn import MLP, AttentionUnit, GRUCell, Linear, Module, Param

PENALTY_REWARD = -1.0e6
ANGLE_CHOICES = np.deg2rad([-60.0, -30.0, 0.0, 30.0, 60.0])
N_ANGLE = len(ANGLE_CHOICES)
N_AGENTS = 5
POSITION_SCALE = 1e-3
RANGE_SCALE = 1e-3


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class AgentAction:
    yaw_idx: int
    pitch_idx: int
    port: int | None = None      # 1-based; None for the active UAV

    @property
    def yaw(self) -> float:
        return float(ANGLE_CHOICES[self.yaw_idx])

    @property
    def pitch(self) -> float:
        return float(ANGLE_CHOICES[self.pitch_idx])


def active_action_count() -> int:
    return N_ANGLE * N_ANGLE


def passive_action_count(n_ports: int) -> int:
    return N_ANGLE * N_ANGLE * n_ports


def decode_action(index: int, n_ports: int | None) -> AgentAction:
    """Flat action id -> (yaw level, pitch level[, port])."""
    if n_ports is None:
        yaw, pitch = divmod(int(index), N_ANGLE)
        return AgentAction(yaw, pitch, None)
    rest, port0 = divmod(int(index), n_ports)
    yaw, pitch = divmod(rest, N_ANGLE)
    return AgentAction(yaw, pitch, port0 + 1)


def encode_action(action: AgentAction, n_ports: int | None) -> int:
    if n_ports is None:
        return action.yaw_idx * N_ANGLE + action.pitch_idx
    return ((action.yaw_idx * N_ANGLE + action.pitch_idx) * n_ports
            + (action.port - 1))


def port_menu_mask(n_actions: int, n_ports: int, menu) -> np.ndarray:
    """Boolean mask over passive action ids whose port is in menu."""
    allowed = np.zeros(n_actions, dtype=bool)
    menu = set(int(p) for p in menu)
    for a in range(n_actions):
        if decode_action(a, n_ports).port in menu:
            allowed[a] = True
    return allowed


def build_observation(agent: int, positions: np.ndarray, aod: np.ndarray,
                      prev_range: float) -> np.ndarray:
    """Raw per-agent observation.

    Agent 0 (active) sees only its own position.  Passive agent k sees
    position, the current departure angles of its uplink paths, and its
    previous slot's measured range sum (0 before the first measurement).
    """
    if agent == 0:
        return positions[0].copy()
    return np.concatenate([positions[agent], aod, [prev_range]])


def scale_observation(agent: int, obs: np.ndarray) -> np.ndarray:
    """Feature scaling applied before any network sees an observation."""
    if agent == 0:
        return obs * POSITION_SCALE
    scaled = obs.copy()
    scaled[:3] *= POSITION_SCALE
    scaled[3:-1] /= math.pi
    scaled[-1] *= RANGE_SCALE
    return scaled


def encode_prev_action(action: AgentAction | None, is_active: bool,
                       n_ports: int) -> np.ndarray:
    """Compact [-1, 1] encoding of the previous slot's action."""
    dim = 2 if is_active else 3
    if action is None:
        return np.zeros(dim)
    enc = [(action.yaw_idx - 2) / 2.0, (action.pitch_idx - 2) / 2.0]
    if not is_active:
        port = action.port if action.port is not None else 1
        enc.append(2.0 * (port - 1) / max(n_ports - 1, 1) - 1.0)
    return np.array(enc)


def reward(estimate, truth, report: wd.ConstraintReport) -> float:
    """Shared slot reward: negative position error, or the flat penalty
    whenever any feasibility constraint is broken."""
    if not report.feasible:
        return PENALTY_REWARD
    return -pos.position_error(estimate, truth)


def select_action(q_values: np.ndarray, epsilon: float,
                  rng: np.random.Generator,
                  allowed: np.ndarray | None = None) -> int:
    """Epsilon-greedy over a Q-vector; ties break to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if allowed is None:
        if epsilon > 0.0 and rng.uniform() < epsilon:
            return int(rng.integers(0, len(q_values)))
        return int(np.argmax(q_values))
    idx = np.flatnonzero(allowed)
    if epsilon > 0.0 and rng.uniform() < epsilon:
        return int(idx[rng.integers(0, len(idx))])
    return int(idx[np.argmax(q_values[idx])])


def build_td_targets(rewards: np.ndarray, next_values: np.ndarray,
                     discount: float) -> np.ndarray:
    """Bootstrapped targets: r_t + discount * V(t+1); terminal uses r alone.

    next_values[t] is the target-network value for slot t+1 and must have
    length len(rewards) - 1 (empty for single-slot episodes).
    """
    rewards = np.asarray(rewards, float)
    next_values = np.asarray(next_values, float)
    if len(next_values) != len(rewards) - 1:
        raise ValueError("need one bootstrap value per non-terminal slot")
    targets = rewards.copy()
    if len(next_values):
        targets[:-1] += discount * next_values
    return targets


def weighted_td_loss(q_global: np.ndarray, q_target: np.ndarray,
                     delta: float) -> tuple[float, np.ndarray]:
    """Sign-weighted squared TD error: weight 1 where the TD error is
    negative, delta otherwise.  Returns (loss, per-slot weights)."""
    q_global = np.asarray(q_global, float)
    q_target = np.asarray(q_target, float)
    if q_global.shape != q_target.shape:
        raise ValueError("sequence length mismatch")
    diff = q_global - q_target
    weights = np.where(diff < 0.0, 1.0, delta)
    return float(np.sum(weights * diff * diff)), weights


# ---------------------------------------------------------------------------
# network blocks


class LocalQNet(Module):
    """Observation embed -> GRU -> additive heads over the action factors.

    The exposed Q-vector covers the full discrete action space.  For a
    passive UAV that space factors into (steering combo, port) and the
    value decomposes additively: one dense head scores the 25 steering
    combos, a second scores the N ports, and q[a] is their sum.  Steering
    affects future geometry while the port decides this slot's uplink, so
    the additive form is the natural inductive bias and every slot trains
    all of both heads' outputs instead of one cell of a 25*N table.

    The decomposition is dueling-style.  A scalar state-value output
    carries the level of the Q function and receives the full TD gradient
    densely on every sample; the steering and port heads are mean-centered
    advantages, so only the differential part of the TD signal shapes the
    action ranking.  Without this split, bootstrapped targets sitting far
    from zero must be absorbed through one-hot updates, a transient that
    saturates the gradient clip and buries the small per-port differences.
    The steering advantage reads the recurrent state; the port advantage
    reads the embedded current observation directly, because the port
    decision is a reaction to this slot's departure angles.  Advantage
    output layers start at zero so initial Q-values are flat and greedy
    maximization is unbiased from the first update.
    """

    def __init__(self, n_in: int, n_angle: int, n_ports: int, cfg, rng,
                 recurrent=True, name="local", aod_slice: tuple = (3, 8)):
        self.recurrent = recurrent
        self.n_angle = n_angle
        self.n_ports = n_ports            # 0 -> steering-only action space
        self.n_actions = n_angle * max(n_ports, 1)
        self.aod_slice = aod_slice
        self.embed = Linear(n_in, cfg.embed_width, rng, f"{name}.embed")
        self.gru = GRUCell(cfg.embed_width, cfg.gru_hidden, rng, f"{name}.gru") \
            if recurrent else None
        head_in = cfg.gru_hidden if recurrent else cfg.embed_width
        self.value_head = Linear(head_in, 1, rng, f"{name}.value")
        self.value_head.w.value[...] = 0.0
        self.value_head.b.value[...] = 0.0
        self.angle_head = MLP([head_in, cfg.mlp_hidden, n_angle], rng,
                              f"{name}.angle")
        # the port pathway owns its embedding and reads only the departure
        # angles, as their cosines: the port response depends on the angles
        # exclusively through cos, and a pathway shared with the steering
        # objective washes those features out before the port ranking forms
        n_aod = aod_slice[1] - aod_slice[0]
        self.port_head = (MLP([n_aod, cfg.embed_width, cfg.mlp_hidden, n_ports],
                              rng, f"{name}.port") if n_ports else None)
        for head in filter(None, (self.angle_head, self.port_head)):
            head.layers[-1].w.value[...] = 0.0
            head.layers[-1].b.value[...] = 0.0
        self.hidden_size = cfg.gru_hidden if recurrent else 0

    def params(self):
        ps = self.embed.params() + self.value_head.params() + self.angle_head.params()
        if self.port_head is not None:
            ps += self.port_head.params()
        if self.gru is not None:
            ps += self.gru.params()
        return ps

    def initial_state(self) -> np.ndarray:
        return np.zeros(max(self.hidden_size, 1))

    def forward(self, x: np.ndarray, h: np.ndarray):
        e_pre, c_embed = self.embed.forward(x)
        mask = e_pre > 0.0
        e = np.maximum(e_pre, 0.0)
        if self.gru is not None:
            h_new, c_gru = self.gru.forward(e, h)
            trunk = h_new
        else:
            h_new, c_gru = h, None
            trunk = e
        value, c_value = self.value_head.forward(trunk)
        adv_angle, c_angle = self.angle_head.forward(trunk)
        adv_angle = adv_angle - adv_angle.mean()
        q_angle = value[0] + adv_angle
        if self.port_head is not None:
            lo, hi = self.aod_slice
            port_features = np.cos(math.pi * x[lo:hi])
            adv_port, c_port = self.port_head.forward(port_features)
            adv_port = adv_port - adv_port.mean()
            q = np.add.outer(q_angle, adv_port).ravel()
        else:
            c_port = None
            q = q_angle
        return q, h_new, (c_embed, mask, c_gru, c_value, c_angle, c_port)

    def backward(self, dq: np.ndarray, dh_next: np.ndarray, cache,
                 advantage_residual: float | None = None):
        """Exact loss backward; advantage_residual optionally replaces the
        scalar flowing into the centered advantage heads.

        The trainer passes the TD gradient minus a running baseline there:
        the dense value path keeps the raw signal, while the advantage
        rankings train on the residual.  A nonzero mean TD otherwise
        ratchets whichever actions the policy happens to visit most
        (selection bias), which buries the small true preferences.
        Fixed points are unchanged: at convergence the baseline is zero.
        """
        c_embed, mask, c_gru, c_value, c_angle, c_port = cache
        if self.port_head is not None:
            dq_grid = dq.reshape(self.n_angle, self.n_ports)
            dangle = dq_grid.sum(axis=1)
            dport = dq_grid.sum(axis=0)
            if advantage_residual is not None and dport.any():
                dport = (dport != 0.0) * advantage_residual
            dport = dport - dport.mean()          # centering Jacobian
            self.port_head.backward(dport, c_port)  # reaches only its own stack
        else:
            dangle = dq
        dvalue = dangle.sum()                      # dense value gradient
        dangle = dangle - dangle.mean()            # centering Jacobian
        dhid = self.angle_head.backward(dangle, c_angle)
        dhid = dhid + self.value_head.backward(np.array([dvalue]), c_value)
        if self.gru is not None:
            dh_total = dhid + dh_next
            de, dh_prev = self.gru.backward(dh_total, c_gru)
        else:
            de, dh_prev = dhid, np.zeros_like(dh_next)
        self.embed.backward(de * mask, c_embed)
        return dh_prev


class Coordinator(Module):
    """Attention summary of the joint recent state-action history."""

    def __init__(self, row_dim: int, cfg, rng, name="coord"):
        self.row_embed = Linear(row_dim, cfg.embed_width, rng, f"{name}.embed")
        self.units = [AttentionUnit(cfg.embed_width, cfg.attn_width, rng,
                                    f"{name}.att{i}")
                      for i in range(cfg.attn_units)]
        self.out_mlp = MLP([cfg.attn_units * cfg.attn_width, cfg.mlp_hidden,
                            cfg.omega_width], rng, f"{name}.out")
        self.omega_width = cfg.omega_width

    def params(self):
        ps = self.row_embed.params()
        for u in self.units:
            ps += u.params()
        return ps + self.out_mlp.params()

    def forward(self, rows: np.ndarray, mask: np.ndarray):
        if not mask.any():
            raise ValueError("history window has no valid rows")
        e_pre, c_embed = self.row_embed.forward(rows)
        act_mask = e_pre > 0.0
        e = np.maximum(e_pre, 0.0)
        pooled, unit_caches = [], []
        n_valid = int(mask.sum())
        for unit in self.units:
            out, c = unit.forward(e, mask)
            pooled.append(out[mask].sum(axis=0) / n_valid)
            unit_caches.append(c)
        concat = np.concatenate(pooled)
        omega, c_out = self.out_mlp.forward(concat)
        width = pooled[0].shape[0]
        cache = (c_embed, act_mask, mask, n_valid, unit_caches, c_out,
                 rows.shape[0], width)
        return omega, cache

    def backward(self, domega: np.ndarray, cache):
        c_embed, act_mask, mask, n_valid, unit_caches, c_out, n_rows, width = cache
        dconcat = self.out_mlp.backward(domega, c_out)
        de = np.zeros((n_rows, act_mask.shape[1]))
        for i, unit in enumerate(self.units):
            dpooled = dconcat[i * width:(i + 1) * width]
            dout_rows = np.zeros((n_rows, width))
            dout_rows[mask] = dpooled / n_valid
            de += unit.backward(dout_rows, unit_caches[i])
        self.row_embed.backward(de * act_mask, c_embed)


MIX_LEAK = 0.2   # hidden-layer slope for negative inputs; Q sums are
                 # negative almost always, a saturating unit would cut the
                 # gradient path to every local network


class Mixer(Module):
    """Hypernetwork mixer: weights for combining the local Q-values are
    produced from the context vector; absolute values keep the global
    Q monotone in every local Q when configured.

    Hypernetwork output biases start at plain-sum mixing so the local
    networks receive full-strength gradients from the first update.
    """

    def __init__(self, n_agents: int, cfg, rng, mode="hyper", name="mixer"):
        self.mode = mode
        self.n_agents = n_agents
        self.monotone = cfg.monotone_mixing
        self.hidden = cfg.mixing_hidden
        self.weight_floor = cfg.mixing_weight_floor
        if mode == "hyper":
            self.h_w1 = Linear(cfg.omega_width, n_agents * self.hidden, rng,
                               f"{name}.h_w1")
            self.h_b1 = Linear(cfg.omega_width, self.hidden, rng, f"{name}.h_b1")
            self.h_w2 = Linear(cfg.omega_width, self.hidden, rng, f"{name}.h_w2")
            self.h_b2 = Linear(cfg.omega_width, 1, rng, f"{name}.h_b2")
            self.h_w1.b.value[...] = 1.0
            self.h_w2.b.value[...] = 1.0 / self.hidden

    def params(self):
        if self.mode != "hyper":
            return []
        return (self.h_w1.params() + self.h_b1.params() + self.h_w2.params()
                + self.h_b2.params())

    def forward(self, q_locals: np.ndarray, omega: np.ndarray):
        if self.mode == "sum":
            return float(q_locals.sum()), ("sum", len(q_locals))
        w1_raw, c_w1 = self.h_w1.forward(omega)
        w1_raw = w1_raw.reshape(self.n_agents, self.hidden)
        b1, c_b1 = self.h_b1.forward(omega)
        w2_raw, c_w2 = self.h_w2.forward(omega)
        b2, c_b2 = self.h_b2.forward(omega)
        w1 = (np.abs(w1_raw) + self.weight_floor / self.hidden
              if self.monotone else w1_raw)
        w2 = np.abs(w2_raw) if self.monotone else w2_raw
        pre = q_locals @ w1 + b1
        hid = np.where(pre > 0.0, pre, MIX_LEAK * pre)
        out = float(hid @ w2 + b2[0])
        cache = ("hyper", q_locals, w1_raw, w1, pre, hid, w2_raw, w2,
                 c_w1, c_b1, c_w2, c_b2)
        return out, cache

    def backward(self, dout: float, cache):
        if cache[0] == "sum":
            return np.full(cache[1], dout), None
        (_, q_locals, w1_raw, w1, pre, hid, w2_raw, w2,
         c_w1, c_b1, c_w2, c_b2) = cache
        dhid = dout * w2
        dw2 = dout * hid
        dpre = dhid * np.where(pre > 0.0, 1.0, MIX_LEAK)
        dq = w1 @ dpre
        dw1 = np.outer(q_locals, dpre)
        if self.monotone:
            dw1 = dw1 * np.sign(w1_raw)
            dw2 = dw2 * np.sign(w2_raw)
        domega = self.h_w1.backward(dw1.reshape(-1), c_w1)
        domega = domega + self.h_b1.backward(dpre, c_b1)
        domega = domega + self.h_w2.backward(dw2, c_w2)
        domega = domega + self.h_b2.backward(np.array([dout]), c_b2)
        return dq, domega


# ---------------------------------------------------------------------------
# policy container


SCHEME_TRAITS = {
    # (trains, learned_ports, recurrent, coordinator, mixer_mode)
    "ar_marl":        (True,  True,  True,  True,  "hyper"),
    "vd_marl":        (True,  True,  True,  False, "sum"),
    "independent_q":  (True,  True,  True,  False, None),
    "no_fas":         (True,  False, True,  True,  "hyper"),
    "no_rnn":         (True,  True,  False, True,  "hyper"),
    "no_transformer": (True,  True,  True,  False, "hyper"),
    "random":         (False, False, False, False, None),
}


class PolicyNets:
    """All trainable pieces for one scheme, plus shape bookkeeping."""

    def __init__(self, cfg: ExperimentConfig, scheme: str,
                 rng: np.random.Generator):
        if scheme not in SCHEME_TRAITS:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.scheme = scheme
        trains, ports, recurrent, coord, mixer_mode = SCHEME_TRAITS[scheme]
        self.learned_ports = ports
        self.recurrent = recurrent
        self.mixer_mode = mixer_mode
        mcfg = cfg.marl
        n_ports = cfg.channel.n_ports
        n_paths = cfg.channel.n_paths

        self.active_inputs = 3 + 2
        self.passive_inputs = (3 + n_paths + 1) + 3
        self.active_actions = active_action_count()
        self.passive_actions = (passive_action_count(n_ports) if ports
                                else active_action_count())

        self.local: list[LocalQNet] = []
        if trains:
            for k in range(N_AGENTS):
                n_in = self.active_inputs if k == 0 else self.passive_inputs
                head_ports = n_ports if (k > 0 and ports) else 0
                self.local.append(LocalQNet(n_in, active_action_count(),
                                            head_ports, mcfg, rng,
                                            recurrent=recurrent,
                                            name=f"local{k}",
                                            aod_slice=(3, 3 + n_paths)))
        self.row_dim = self.active_inputs + 4 * self.passive_inputs
        self.coordinator = (Coordinator(self.row_dim, mcfg, rng)
                            if trains and coord else None)
        self.mixer = (Mixer(N_AGENTS, mcfg, rng, mode=mixer_mode)
                      if trains and mixer_mode else None)
        self.omega_width = mcfg.omega_width

    def modules(self) -> list[Module]:
        mods: list[Module] = list(self.local)
        if self.coordinator is not None:
            mods.append(self.coordinator)
        if self.mixer is not None:
            mods.append(self.mixer)
        return mods

    def params(self) -> list[Param]:
        return [p for m in self.modules() for p in m.params()]

    def zero_grads(self):
        for m in self.modules():
            m.zero_grads()

    def named_values(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules():
            out.update(m.named_values())
        return out

    def load_values(self, values: dict[str, np.ndarray]):
        for m in self.modules():
            m.load_values(values)

    def copy_from(self, other: "PolicyNets"):
        for dst, src in zip(self.modules(), other.modules()):
            dst.copy_from(src)


# ---------------------------------------------------------------------------
# environment


class PositioningEnv:
    """One episode of the tracking scenario.

    Each UAV keeps a persistent flight heading; an action turns it by a
    bounded yaw/pitch increment for that slot (the bounded quantity in
    the feasibility constraints is the per-slot change).  Slot order:
    agents observe (current positions, this slot's departure angles, last
    measured range sums), act, everyone moves, the bistatic ranges are
    measured at the new geometry, the passive UAVs upload through their
    chosen ports, and the ground station refreshes the fix from whichever
    reports met the latency budget.  Fewer than min_usable fresh reports
    keeps the previous fix (a stale slot).
    """

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        if cfg.world.n_controlled != N_AGENTS:
            raise ValueError("the team is fixed at 1 active + 4 passive UAVs")
        self.cfg = cfg
        self.rng = rng
        self.bs = np.array(cfg.scenario.bs_position, float)
        self.slot = 0
        self.positions = np.zeros((N_AGENTS, 3))
        self.headings = np.zeros((N_AGENTS, 2))   # persistent [yaw, pitch]
        self.traj = None
        self.estimate = np.zeros(3)
        self.prev_ranges = np.zeros(4)
        self.aods = np.zeros((4, cfg.channel.n_paths))
        self._gate_rejects = 0

    def _draw_aods(self):
        self.aods = self.rng.uniform(0.0, math.pi, size=(4, self.cfg.channel.n_paths))

    def _initial_headings(self) -> np.ndarray:
        headings = np.zeros((N_AGENTS, 2))
        if self.cfg.scenario.initial_heading == "level":
            return headings
        goal = np.array(self.cfg.target.start, float)
        wcfg = self.cfg.world
        for k in range(N_AGENTS):
            d = goal - self.positions[k]
            headings[k, 0] = math.atan2(d[1], d[0])
            pitch = math.asin(max(-1.0, min(1.0, d[2] / np.linalg.norm(d))))
            headings[k, 1] = min(max(pitch, wcfg.pitch_min), wcfg.pitch_max)
        return headings

    def reset(self) -> list[np.ndarray]:
        sc = self.cfg.scenario
        self.positions = np.vstack([np.array(sc.active_start, float),
                                    np.array(sc.passive_starts, float)])
        self.headings = self._initial_headings()
        self.traj = wd.TargetTrajectory(self.cfg.target,
                                        self.cfg.world.slot_duration)
        self.estimate = self.positions[1:].mean(axis=0)
        self.prev_ranges = np.zeros(4)
        self.slot = 0
        self._gate_rejects = 0
        self._draw_aods()
        return self.observations()

    @property
    def target_position(self) -> np.ndarray:
        return self.traj.position.copy()

    def observations(self) -> list[np.ndarray]:
        return [build_observation(k, self.positions,
                                  self.aods[k - 1] if k > 0 else None,
                                  self.prev_ranges[k - 1] if k > 0 else 0.0)
                for k in range(N_AGENTS)]

    def step(self, actions: list[AgentAction]):
        cfg = self.cfg
        wcfg = cfg.world
        params = cfg.channel

        deltas = np.zeros((N_AGENTS, 2))
        for k, act in enumerate(actions):
            deltas[k] = (act.yaw, act.pitch)
            yaw = self.headings[k, 0] + act.yaw
            yaw = (yaw + math.pi) % (2.0 * math.pi) - math.pi
            pitch = self.headings[k, 1] + act.pitch
            pitch = min(max(pitch, wcfg.pitch_min), wcfg.pitch_max)
            self.headings[k] = (yaw, pitch)
            self.positions[k] = wd.step_controlled(
                self.positions[k], wd.ControlAngles(yaw, pitch), wcfg,
                enforce_bounds=False)
        target = self.traj.step(self.rng)

        ports = np.array([a.port if a.port is not None else 1
                          for a in actions[1:]], dtype=int)

        # bistatic range measurements at the new geometry
        measurements = []
        for i in range(4):
            snr = ch.bistatic_snr(self.positions[0], self.positions[1 + i],
                                  target, params)
            m, _ = pos.true_range_sum(self.positions[0], self.positions[1 + i],
                                      target, wcfg.light_speed)
            meas = pos.sample_range(m, snr, self.rng,
                                    cfg.positioning.variance_scale,
                                    uav_index=i, light_speed=wcfg.light_speed)
            measurements.append(meas)

        # uplink through the selected ports
        gains = np.zeros(4, dtype=complex)
        for i in range(4):
            draw = ch.draw_channel(self.rng, params, aod=self.aods[i])
            r_bs = float(np.linalg.norm(self.positions[1 + i] - self.bs))
            loss = ch.path_loss_db(r_bs, params, draw.shadow_db)
            gains[i] = ch.fas_gain(draw, int(ports[i]), params, loss)
        sinrs = ch.uplink_sinr(gains, params)
        latencies = ch.uplink_latencies(sinrs, params)

        usable = [(measurements[i], self.positions[1 + i]) for i in range(4)
                  if measurements[i] is not None
                  and latencies[i] <= cfg.scenario.latency_budget]
        stale = len(usable) < cfg.positioning.min_usable
        if not stale:
            fit = pos.estimate_position(
                [m for m, _ in usable], self.positions[0],
                np.array([p for _, p in usable]), self.estimate,
                step_tol=cfg.positioning.solver_tol,
                max_iter=cfg.positioning.solver_max_iter)
            gate = cfg.positioning.innovation_gate
            if gate > 0.0:
                jump = float(np.linalg.norm(fit.position - self.estimate))
                if jump > gate * (1 + self._gate_rejects):
                    # implausible jump: treat like a missing fix
                    self._gate_rejects += 1
                    stale = True
                else:
                    self._gate_rejects = 0
                    self.estimate = fit.position
            else:
                self.estimate = fit.position

        error = pos.position_error(self.estimate, target)
        state = wd.WorldState(self.positions.copy(), target, deltas, ports,
                              self.slot)
        report = wd.check_constraints(state, latencies, wcfg,
                                      cfg.scenario.latency_budget,
                                      params.n_ports)
        reward_raw = reward(self.estimate, target, report)

        for i in range(4):
            if measurements[i] is not None:
                self.prev_ranges[i] = measurements[i].measured

        self.slot += 1
        if cfg.scenario.channel_coherence == "slot":
            self._draw_aods()

        info = {
            "reward": reward_raw,
            "error": error,
            "stale": stale,
            "feasible": report.feasible,
            "latency_violations": int(np.sum(
                latencies > cfg.scenario.latency_budget)),
            "report": report,
        }
        return self.observations(), info


# ---------------------------------------------------------------------------
# episode storage


@dataclass
class EpisodeData:
    net_inputs: list = field(default_factory=list)    # [t][k] -> np.ndarray
    action_ids: list = field(default_factory=list)    # [t][k] -> int
    actions: list = field(default_factory=list)       # [t][k] -> AgentAction
    window_rows: list = field(default_factory=list)   # [t] -> (T, row_dim)
    rewards_raw: list = field(default_factory=list)
    rewards_train: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    feasible: list = field(default_factory=list)
    stales: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    live_caches: list = field(default_factory=list)   # [t][k] -> net cache
    live_q: list = field(default_factory=list)        # [t][k] -> q vector
    hidden: list = field(default_factory=list)        # [t][k] -> h before slot t

    def __len__(self):
        return len(self.rewards_raw)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_error: float
    mean_reward: float
    loss: float
    violations: int
    epsilon: float


@dataclass
class TrainingLog:
    scheme: str
    seed: int
    records: list = field(default_factory=list)

    def final_mean_error(self, last_n: int = 20) -> float:
        tail = self.records[-last_n:]
        return float(np.mean([r.mean_error for r in tail]))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"scheme": self.scheme, "seed": self.seed},
                            sort_keys=True)]
        for r in self.records:
            lines.append(json.dumps({
                "epoch": r.epoch, "mean_error": r.mean_error,
                "mean_reward": r.mean_reward, "loss": r.loss,
                "violations": r.violations, "epsilon": r.epsilon,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainingLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        log = cls(scheme=head["scheme"], seed=head["seed"])
        prev_epoch = -1
        for ln in lines[1:]:
            d = json.loads(ln)
            if d["epoch"] <= prev_epoch:
                raise ValueError("epoch indices must increase")
            prev_epoch = d["epoch"]
            log.records.append(EpochRecord(**d))
        return log


# ---------------------------------------------------------------------------
# trainer


class MarlTrainer:
    """Rollout, loss, explicit backprop and parameter updates for every
    scheme.  Baselines reuse the same machinery with pieces disabled."""

    def __init__(self, cfg: ExperimentConfig, scheme: str | None = None):
        self.cfg = cfg
        self.scheme = scheme or cfg.run.scheme
        if self.scheme not in SCHEME_TRAITS:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        seq = np.random.SeedSequence(cfg.run.seed)
        init_ss, env_ss, pol_ss = seq.spawn(3)
        self.init_rng = np.random.Generator(np.random.PCG64(init_ss))
        self.env_rng = np.random.Generator(np.random.PCG64(env_ss))
        self.policy_rng = np.random.Generator(np.random.PCG64(pol_ss))

        self.trains = SCHEME_TRAITS[self.scheme][0]
        self.nets = (PolicyNets(cfg, self.scheme, self.init_rng)
                     if self.trains else None)
        self.target_nets = None
        if self.trains:
            self.target_nets = PolicyNets(cfg, self.scheme, self.init_rng)
            self.target_nets.copy_from(self.nets)
        self.updates = 0
        self.inter_agent_messages = 0
        self.n_ports = cfg.channel.n_ports
        # running TD-gradient baseline per agent for the advantage heads
        self._adv_baseline = np.zeros(N_AGENTS)
        self._lr_scale = 1.0
        self._port_frozen = False
        self._port_floor_scale = 1.0

    # -- epsilon schedule ---------------------------------------------------

    def epsilon_at(self, episode_index: int, total_episodes: int) -> float:
        m = self.cfg.marl
        horizon = max(int(m.anneal_fraction * total_episodes), 1)
        frac = min(episode_index / horizon, 1.0)
        return m.eps_start + frac * (m.eps_end - m.eps_start)

    # -- per-slot plumbing ----------------------------------------------------

    def _net_input(self, agent: int, obs: np.ndarray,
                   prev_action: AgentAction | None) -> np.ndarray:
        scaled = scale_observation(agent, obs)
        enc = encode_prev_action(prev_action, agent == 0, self.n_ports)
        return np.concatenate([scaled, enc])

    def _joint_row(self, observations, actions) -> np.ndarray:
        parts = []
        for k in range(N_AGENTS):
            parts.append(scale_observation(k, observations[k]))
            parts.append(encode_prev_action(actions[k], k == 0, self.n_ports))
        return np.concatenate(parts)

    def _window(self, episode: EpisodeData, t: int):
        t_h = self.cfg.marl.history_window
        rows = np.zeros((t_h, self.nets.row_dim))
        mask = np.zeros(t_h, dtype=bool)
        start = max(0, t + 1 - t_h)
        chunk = np.array(episode.window_rows[start:t + 1])
        rows[t_h - len(chunk):] = chunk
        mask[t_h - len(chunk):] = True
        return rows, mask

    def _choose_ports_randomly(self) -> np.ndarray:
        return self.policy_rng.integers(1, self.n_ports + 1, size=4)

    def _factored_select(self, q: np.ndarray, epsilon: float) -> int:
        """Training-time action pick for a (steering, port) factored space.

        Each factor draws its own exploration coin: a flat epsilon-greedy
        over the product space stops producing counterfactual port data
        the moment the policy goes greedy, and the port ranking then
        freezes at whatever the anneal phase reached.  The port factor
        additionally keeps a standing exploration floor.
        """
        greedy = decode_action(int(np.argmax(q)), self.n_ports)
        rng = self.policy_rng
        if epsilon > 0.0 and rng.uniform() < epsilon:
            yaw = int(rng.integers(N_ANGLE))
            pitch = int(rng.integers(N_ANGLE))
        else:
            yaw, pitch = greedy.yaw_idx, greedy.pitch_idx
        floor = self.cfg.marl.port_eps_floor * self._port_floor_scale
        port_eps = max(epsilon, floor)
        if port_eps > 0.0 and rng.uniform() < port_eps:
            port = int(rng.integers(1, self.n_ports + 1))
        else:
            port = greedy.port
        return encode_action(AgentAction(yaw, pitch, port), self.n_ports)

    # -- rollout --------------------------------------------------------------

    def rollout(self, env: PositioningEnv, epsilon: float,
                collect_caches: bool = True) -> EpisodeData:
        ep = EpisodeData()
        observations = env.reset()
        m = self.cfg.marl
        hidden = None
        prev_actions: list[AgentAction | None] = [None] * N_AGENTS
        if self.nets is not None:
            hidden = [net.initial_state() for net in self.nets.local]

        for t in range(self.cfg.world.slots_per_episode):
            inputs, qs, caches, h_before = [], [], [], []
            ids, acts = [], []
            random_ports = (None if self.nets is None or self.nets.learned_ports
                            else self._choose_ports_randomly())
            for k in range(N_AGENTS):
                if self.nets is None:
                    n_act = (active_action_count() if k == 0
                             else passive_action_count(self.n_ports))
                    a_id = int(self.policy_rng.integers(0, n_act))
                    action = decode_action(a_id, None if k == 0 else self.n_ports)
                    inputs.append(None)
                    qs.append(None)
                    caches.append(None)
                    h_before.append(None)
                else:
                    x = self._net_input(k, observations[k], prev_actions[k])
                    h_prev = hidden[k]
                    q, h_new, cache = self.nets.local[k].forward(x, h_prev)
                    if k == 0:
                        a_id = select_action(q, epsilon, self.policy_rng)
                        action = decode_action(a_id, None)
                    elif self.nets.learned_ports:
                        a_id = self._factored_select(q, epsilon)
                        action = decode_action(a_id, self.n_ports)
                    else:
                        a_id = select_action(q, epsilon, self.policy_rng)
                        angles = decode_action(a_id, None)
                        action = AgentAction(angles.yaw_idx, angles.pitch_idx,
                                             int(random_ports[k - 1]))
                    inputs.append(x)
                    qs.append(q)
                    caches.append(cache if collect_caches else None)
                    h_before.append(h_prev)
                    hidden[k] = h_new
                ids.append(a_id)
                acts.append(action)

            row = self._joint_row(observations, acts)
            observations, info = env.step(acts)
            prev_actions = acts

            ep.net_inputs.append(inputs)
            ep.action_ids.append(ids)
            ep.actions.append(acts)
            ep.window_rows.append(row)
            ep.rewards_raw.append(info["reward"])
            ep.rewards_train.append(
                max(info["reward"], -m.penalty_clip) / m.reward_scale)
            ep.errors.append(info["error"])
            ep.feasible.append(info["feasible"])
            ep.stales.append(info["stale"])
            ep.violations.append(info["latency_violations"])
            ep.live_caches.append(caches)
            ep.live_q.append(qs)
            ep.hidden.append(h_before)
        return ep

    # -- global Q forward/backward letting gradients reach every piece -------

    def _global_q_forward(self, nets: PolicyNets, q_chosen: np.ndarray,
                          rows: np.ndarray, mask: np.ndarray):
        if nets.coordinator is not None:
            omega, c_coord = nets.coordinator.forward(rows, mask)
            self.inter_agent_messages += N_AGENTS
        else:
            omega, c_coord = np.zeros(nets.omega_width), None
        q_total, c_mix = nets.mixer.forward(q_chosen, omega)
        self.inter_agent_messages += N_AGENTS
        return q_total, (c_coord, c_mix)

    def _global_q_backward(self, nets: PolicyNets, d_qtotal: float, cache):
        c_coord, c_mix = cache
        dq, domega = nets.mixer.backward(d_qtotal, c_mix)
        if nets.coordinator is not None and domega is not None:
            nets.coordinator.backward(domega, c_coord)
        return dq

    def _target_values(self, episode: EpisodeData) -> np.ndarray:
        """Target-network global values at per-agent greedy actions, one per
        slot (used as the bootstrap for the preceding slot)."""
        tnets = self.target_nets
        T = len(episode)
        hidden = [net.initial_state() for net in tnets.local]
        greedy = np.zeros((T, N_AGENTS))
        for t in range(T):
            for k in range(N_AGENTS):
                q, h_new, _ = tnets.local[k].forward(episode.net_inputs[t][k],
                                                     hidden[k])
                hidden[k] = h_new
                greedy[t, k] = float(np.max(q))
        values = np.zeros(T)
        for t in range(T):
            if tnets.mixer is None:
                values[t] = float(greedy[t].sum())
            else:
                if tnets.coordinator is not None:
                    rows, mask = self._window(episode, t)
                    omega, _ = tnets.coordinator.forward(rows, mask)
                else:
                    omega = np.zeros(tnets.omega_width)
                values[t], _ = tnets.mixer.forward(greedy[t], omega)
        return values

    def _per_agent_target_values(self, episode: EpisodeData) -> np.ndarray:
        tnets = self.target_nets
        T = len(episode)
        hidden = [net.initial_state() for net in tnets.local]
        greedy = np.zeros((T, N_AGENTS))
        for t in range(T):
            for k in range(N_AGENTS):
                q, h_new, _ = tnets.local[k].forward(episode.net_inputs[t][k],
                                                     hidden[k])
                hidden[k] = h_new
                greedy[t, k] = float(np.max(q))
        return greedy

    # -- loss + updates -------------------------------------------------------

    def _apply_sgd(self):
        m = self.cfg.marl
        for net in self.nets.local:
            if net.port_head is None:
                continue
            for p in net.port_head.params():
                if self._port_frozen:
                    p.grad[...] = 0.0
                else:
                    p.grad *= m.port_lr_multiplier
        params = self.nets.params()
        total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
        scale = 1.0 if total <= m.grad_clip else m.grad_clip / total
        rate = m.learning_rate * self._lr_scale
        for p in params:
            p.value -= rate * scale * p.grad
        self.nets.zero_grads()
        self.updates += 1
        if self.updates % m.target_sync == 0:
            self.target_nets.copy_from(self.nets)

    def _bptt_locals(self, episode: EpisodeData, dq_scalars: np.ndarray):
        """Backprop the per-slot chosen-action gradients through each local
        net, carrying the recurrent gradient backward in time.  Advantage
        heads receive the episode-centered residual as their signal."""
        T = len(episode)
        for k in range(N_AGENTS):
            net = self.nets.local[k]
            baseline = float(dq_scalars[:, k].mean())
            dh = np.zeros(max(net.hidden_size, 1))
            for t in reversed(range(T)):
                dq_vec = np.zeros(net.n_actions)
                dq_vec[episode.action_ids[t][k]] = dq_scalars[t, k]
                dh = net.backward(dq_vec, dh, episode.live_caches[t][k],
                                  advantage_residual=dq_scalars[t, k] - baseline)

    def train_on_episode(self, episode: EpisodeData) -> float:
        m = self.cfg.marl
        T = len(episode)
        rewards = np.asarray(episode.rewards_train)

        if self.scheme == "independent_q":
            greedy = self._per_agent_target_values(episode)
            total_loss = 0.0
            dq_scalars = np.zeros((T, N_AGENTS))
            for k in range(N_AGENTS):
                q_taken = np.array([episode.live_q[t][k][episode.action_ids[t][k]]
                                    for t in range(T)])
                targets = build_td_targets(rewards, greedy[1:, k], m.discount)
                loss_k, weights = weighted_td_loss(q_taken, targets, m.delta)
                total_loss += loss_k
                dq_scalars[:, k] = 2.0 * weights * (q_taken - targets)
            self._bptt_locals(episode, dq_scalars)
            if not math.isfinite(total_loss):
                raise TrainingDiverged("independent-Q loss is not finite",
                                       {"loss": total_loss})
            self._apply_sgd()
            return total_loss

        # factorized schemes: one global TD per slot
        q_chosen = np.array([[episode.live_q[t][k][episode.action_ids[t][k]]
                              for k in range(N_AGENTS)] for t in range(T)])
        q_global = np.zeros(T)
        mix_caches = []
        for t in range(T):
            rows, mask = self._window(episode, t)
            q_global[t], cache = self._global_q_forward(self.nets, q_chosen[t],
                                                        rows, mask)
            mix_caches.append(cache)

        boot = self._target_values(episode)
        targets = build_td_targets(rewards, boot[1:], m.discount)
        loss, weights = weighted_td_loss(q_global, targets, m.delta)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                "global TD loss is not finite",
                {"loss": loss, "q_global": q_global.tolist(),
                 "targets": targets.tolist()})

        dq_scalars = np.zeros((T, N_AGENTS))
        for t in range(T):
            d_qtotal = 2.0 * weights[t] * (q_global[t] - targets[t])
            dq_scalars[t] = self._global_q_backward(self.nets, d_qtotal,
                                                    mix_caches[t])
        self._bptt_locals(episode, dq_scalars)
        self._apply_sgd()
        return loss

    def train_on_episode_per_slot(self, episode: EpisodeData) -> float:
        """Slot-cadence updates: one truncated gradient step per slot, with
        the stored recurrent states treated as constants."""
        m = self.cfg.marl
        T = len(episode)
        rewards = np.asarray(episode.rewards_train)
        boot = self._target_values(episode)
        total_loss = 0.0
        for t in range(T):
            target = rewards[t] + (m.discount * boot[t + 1] if t + 1 < T else 0.0)
            q_fresh = []
            caches = []
            for k in range(N_AGENTS):
                q, _, cache = self.nets.local[k].forward(
                    episode.net_inputs[t][k], episode.hidden[t][k])
                q_fresh.append(q)
                caches.append(cache)
            q_chosen = np.array([q_fresh[k][episode.action_ids[t][k]]
                                 for k in range(N_AGENTS)])
            if self.scheme == "independent_q":
                for k in range(N_AGENTS):
                    diff = q_chosen[k] - target
                    w = 1.0 if diff < 0 else m.delta
                    total_loss += w * diff * diff
                    g = 2.0 * w * diff
                    dq_vec = np.zeros(self.nets.local[k].n_actions)
                    dq_vec[episode.action_ids[t][k]] = g
                    self.nets.local[k].backward(
                        dq_vec, np.zeros(max(self.nets.local[k].hidden_size, 1)),
                        caches[k],
                        advantage_residual=g - self._adv_baseline[k])
                    self._adv_baseline[k] = (0.95 * self._adv_baseline[k]
                                             + 0.05 * g)
            else:
                rows, mask = self._window(episode, t)
                q_total, cache = self._global_q_forward(self.nets, q_chosen,
                                                        rows, mask)
                diff = q_total - target
                w = 1.0 if diff < 0 else m.delta
                total_loss += w * diff * diff
                dq = self._global_q_backward(self.nets, 2.0 * w * diff, cache)
                for k in range(N_AGENTS):
                    dq_vec = np.zeros(self.nets.local[k].n_actions)
                    dq_vec[episode.action_ids[t][k]] = dq[k]
                    self.nets.local[k].backward(
                        dq_vec, np.zeros(max(self.nets.local[k].hidden_size, 1)),
                        caches[k],
                        advantage_residual=dq[k] - self._adv_baseline[k])
                    self._adv_baseline[k] = (0.95 * self._adv_baseline[k]
                                             + 0.05 * dq[k])
            self._apply_sgd()
        if not math.isfinite(total_loss):
            raise TrainingDiverged("slot-cadence loss is not finite",
                                   {"loss": total_loss})
        return float(total_loss)

    # -- main loop ------------------------------------------------------------

    def run(self) -> TrainingLog:
        cfg = self.cfg
        log = TrainingLog(scheme=self.scheme, seed=cfg.run.seed)
        env = PositioningEnv(cfg, self.env_rng)
        total_eps = cfg.run.epochs * cfg.run.episodes_per_epoch
        ep_index = 0
        for epoch in range(cfg.run.epochs):
            errs, rews, losses, viols = [], [], [], 0
            eps = 0.0
            for _ in range(cfg.run.episodes_per_epoch):
                eps = (self.epsilon_at(ep_index, total_eps)
                       if self.trains else 1.0)
                progress = ep_index / max(total_eps - 1, 1)
                self._lr_scale = 1.0 - (1.0 - cfg.marl.lr_final_fraction) * progress
                self._port_frozen = progress < cfg.marl.port_warmup_fraction
                # late-run rollouts should reflect the learned ports: fade
                # the standing exploration floor near the end of training
                self._port_floor_scale = min(1.0, 6.0 * max(1.0 - progress, 0.0))
                episode = self.rollout(env, eps if self.trains else 1.0,
                                       collect_caches=self.trains)
                if self.trains:
                    if cfg.marl.update_cadence == "slot":
                        loss = self.train_on_episode_per_slot(episode)
                    else:
                        loss = self.train_on_episode(episode)
                else:
                    loss = 0.0
                ep_index += 1
                errs.extend(episode.errors)
                rews.extend(episode.rewards_raw)
                losses.append(loss)
                viols += int(np.sum(np.asarray(episode.feasible) == False))
            log.records.append(EpochRecord(
                epoch=epoch,
                mean_error=float(np.mean(errs)),
                mean_reward=float(np.mean(rews)),
                loss=float(np.mean(losses)),
                violations=viols,
                epsilon=float(eps if self.trains else 1.0)))
        return log

    # -- checkpoints ----------------------------------------------------------

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        if self.nets is None:
            return {}
        return self.nets.named_values()

    def load_checkpoint_arrays(self, arrays: dict[str, np.ndarray]):
        if self.nets is None:
            if arrays:
                raise ValueError("random policy carries no parameters")
            return
        self.nets.load_values(arrays)
        self.target_nets.copy_from(self.nets)


def train(cfg: ExperimentConfig) -> TrainingLog:
    """Train the configured scheme and return the per-epoch log."""
    return MarlTrainer(cfg).run()


def run_baseline(kind: str, cfg: ExperimentConfig) -> TrainingLog:
    """Run one of the comparison schemes under the same experiment config."""
    if kind not in SCHEME_TRAITS:
        raise ValueError(f"unknown baseline {kind!r}")
    return MarlTrainer(cfg, scheme=kind).run()


# ---------------------------------------------------------------------------
# evaluation


def evaluate_rollouts(cfg: ExperimentConfig, trainer: MarlTrainer,
                      episodes: int, seed: int,
                      port_menu=None) -> dict:
    """Greedy (epsilon=0) rollouts with per-episode reseeded environment
    streams, so different policies or port menus face identical channel,
    shadowing and measurement randomness episode for episode."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    nets = trainer.nets
    n_ports = cfg.channel.n_ports
    allowed = None
    if port_menu is not None and nets is not None and nets.learned_ports:
        allowed = port_menu_mask(nets.passive_actions, n_ports, port_menu)
    menu_array = (np.array(sorted(int(p) for p in port_menu), dtype=int)
                  if port_menu is not None else None)

    errors, rewards = [], []
    stale_slots = 0
    violation_slots = 0
    total_slots = 0
    for ep in range(episodes):
        env_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, ep, 0))))
        pol_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((seed, ep, 1))))
        env = PositioningEnv(cfg, env_rng)
        observations = env.reset()
        prev_actions: list[AgentAction | None] = [None] * N_AGENTS
        hidden = ([net.initial_state() for net in nets.local]
                  if nets is not None else None)
        for _ in range(cfg.world.slots_per_episode):
            acts = []
            for k in range(N_AGENTS):
                if nets is None:
                    if k == 0:
                        a_id = int(pol_rng.integers(0, active_action_count()))
                        acts.append(decode_action(a_id, None))
                    else:
                        yaw_pitch = int(pol_rng.integers(0, active_action_count()))
                        base = decode_action(yaw_pitch, None)
                        port = (int(menu_array[pol_rng.integers(len(menu_array))])
                                if menu_array is not None
                                else int(pol_rng.integers(1, n_ports + 1)))
                        acts.append(AgentAction(base.yaw_idx, base.pitch_idx, port))
                    continue
                x = trainer._net_input(k, observations[k], prev_actions[k])
                q, h_new, _ = nets.local[k].forward(x, hidden[k])
                hidden[k] = h_new
                if k == 0:
                    acts.append(decode_action(select_action(q, 0.0, pol_rng), None))
                elif nets.learned_ports:
                    a_id = select_action(q, 0.0, pol_rng, allowed=allowed)
                    acts.append(decode_action(a_id, n_ports))
                else:
                    a_id = select_action(q, 0.0, pol_rng)
                    base = decode_action(a_id, None)
                    port = (int(menu_array[pol_rng.integers(len(menu_array))])
                            if menu_array is not None
                            else int(pol_rng.integers(1, n_ports + 1)))
                    acts.append(AgentAction(base.yaw_idx, base.pitch_idx, port))
            observations, info = env.step(acts)
            prev_actions = acts
            errors.append(info["error"])
            rewards.append(info["reward"])
            stale_slots += int(info["stale"])
            violation_slots += int(not info["feasible"])
            total_slots += 1
    return {
        "episodes": episodes,
        "mean_error": float(np.mean(errors)),
        "std_error": float(np.std(errors)),
        "mean_reward": float(np.mean(rewards)),
        "stale_rate": stale_slots / total_slots,
        "violation_rate": violation_slots / total_slots,
    }


# ---------------------------------------------------------------------------
# end-to-end gradient verification


def episode_loss_components(trainer: MarlTrainer, episode: EpisodeData,
                            targets: np.ndarray, weights: np.ndarray,
                            compute_grads: bool) -> float:
    """Recompute the weighted TD loss from scratch under the current live
    parameters (targets and TD-sign weights held fixed), optionally
    accumulating analytic gradients for every parameter."""
    nets = trainer.nets
    T = len(episode)
    hidden = [net.initial_state() for net in nets.local]
    q_chosen = np.zeros((T, N_AGENTS))
    local_caches = [[None] * N_AGENTS for _ in range(T)]
    for t in range(T):
        for k in range(N_AGENTS):
            q, h_new, cache = nets.local[k].forward(episode.net_inputs[t][k],
                                                    hidden[k])
            hidden[k] = h_new
            q_chosen[t, k] = q[episode.action_ids[t][k]]
            local_caches[t][k] = cache
    q_global = np.zeros(T)
    mix_caches = []
    for t in range(T):
        rows, mask = trainer._window(episode, t)
        q_global[t], cache = trainer._global_q_forward(nets, q_chosen[t],
                                                       rows, mask)
        mix_caches.append(cache)
    diff = q_global - targets
    loss = float(np.sum(weights * diff * diff))
    if not compute_grads:
        return loss
    dq_scalars = np.zeros((T, N_AGENTS))
    for t in range(T):
        dq_scalars[t] = trainer._global_q_backward(
            nets, 2.0 * weights[t] * diff[t], mix_caches[t])
    for k in range(N_AGENTS):
        net = nets.local[k]
        dh = np.zeros(max(net.hidden_size, 1))
        for t in reversed(range(T)):
            dq_vec = np.zeros(net.n_actions)
            dq_vec[episode.action_ids[t][k]] = dq_scalars[t, k]
            dh = net.backward(dq_vec, dh, local_caches[t][k])
    return loss


def micro_gradcheck(cfg: ExperimentConfig, eps: float = 1e-5) -> float:
    """Finite-difference check of the full loss path on one short episode.

    Returns the worst relative error over every trainable parameter of the
    local nets, the attention coordinator, and the mixer.
    """
    from .nn import finite_diff_check

    trainer = MarlTrainer(cfg)
    if trainer.nets is None:
        raise ValueError("gradient check needs a trainable scheme")
    env = PositioningEnv(cfg, trainer.env_rng)
    episode = trainer.rollout(env, epsilon=0.3)
    rewards = np.asarray(episode.rewards_train)
    boot = trainer._target_values(episode)
    targets = build_td_targets(rewards, boot[1:], cfg.marl.discount)
    base_q = np.zeros(len(episode))
    # establish the TD-sign weights at the base point, then freeze them so
    # the loss stays differentiable across the finite-difference stencil
    trainer.nets.zero_grads()
    hidden = [net.initial_state() for net in trainer.nets.local]
    for t in range(len(episode)):
        chosen = np.zeros(N_AGENTS)
        for k in range(N_AGENTS):
            q, h_new, _ = trainer.nets.local[k].forward(
                episode.net_inputs[t][k], hidden[k])
            hidden[k] = h_new
            chosen[k] = q[episode.action_ids[t][k]]
        rows, mask = trainer._window(episode, t)
        base_q[t], _ = trainer._global_q_forward(trainer.nets, chosen, rows, mask)
    _, weights = weighted_td_loss(base_q, targets, cfg.marl.delta)

    trainer.nets.zero_grads()
    episode_loss_components(trainer, episode, targets, weights, True)

    def loss_only():
        return episode_loss_components(trainer, episode, targets, weights, False)

    return finite_diff_check(loss_only, trainer.nets.params(), eps=eps)


def micro_config(base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Shrunken sizes for gradient checks: tiny nets, few ports and paths,
    two-slot episodes."""
    import dataclasses

    cfg = base or ExperimentConfig()
    return dataclasses.replace(
        cfg,
        world=dataclasses.replace(cfg.world, slots_per_episode=2),
        channel=dataclasses.replace(cfg.channel, n_ports=3, n_paths=2),
        marl=dataclasses.replace(cfg.marl, gru_hidden=6, mlp_hidden=6,
                                 embed_width=5, attn_units=2, attn_width=3,
                                 omega_width=4, history_window=2,
                                 mixing_hidden=4),
        run=dataclasses.replace(cfg.run, scheme="ar_marl"),
    )
