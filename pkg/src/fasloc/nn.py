"""Hand-rolled differentiable blocks: dense layers, a GRU cell, and
single-head scaled dot-product attention.

Only these fixed block types are differentiable; there is no general
graph engine.  Every forward pass returns an explicit cache and every
backward consumes one, so weight-sharing across timesteps is just
repeated forward calls with the caches replayed in reverse.  All
arithmetic is double precision; central-difference verification of each
backward pass is part of the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class Param:
    """A weight array paired with its gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.grad = np.zeros_like(self.value)


def uniform_init(rng: np.random.Generator, n_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / n_in)
    return rng.uniform(-bound, bound, size=shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Module:
    """Minimal parameter registry shared by all blocks."""

    def params(self) -> list[Param]:
        raise NotImplementedError

    def zero_grads(self):
        for p in self.params():
            p.grad[...] = 0.0

    def named_values(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + p.name: p.value for p in self.params()}

    def load_values(self, values: dict[str, np.ndarray], prefix: str = ""):
        for p in self.params():
            key = prefix + p.name
            if key not in values:
                raise ShapeError(f"missing parameter {key}")
            src = values[key]
            if src.shape != p.value.shape:
                raise ShapeError(f"shape mismatch for {key}: "
                                 f"{src.shape} vs {p.value.shape}")
            p.value[...] = src

    def copy_from(self, other: "Module"):
        for dst, src in zip(self.params(), other.params()):
            dst.value[...] = src.value


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 name: str = "linear"):
        self.n_in, self.n_out = n_in, n_out
        self.w = Param(f"{name}.w", uniform_init(rng, n_in, (n_in, n_out)))
        self.b = Param(f"{name}.b", uniform_init(rng, n_in, (n_out,)))

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, float)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"expected last dim {self.n_in}, got {x.shape}")
        return x @ self.w.value + self.b.value, x

    def backward(self, dy: np.ndarray, cache) -> np.ndarray:
        x = cache
        if x.ndim == 1:
            self.w.grad += np.outer(x, dy)
            self.b.grad += dy
        else:
            self.w.grad += x.T @ dy
            self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value.T


class MLP(Module):
    """Dense stack with rectifier activations between layers, linear output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator,
                 name: str = "mlp"):
        if len(sizes) < 2:
            raise ShapeError("MLP needs at least input and output sizes")
        self.layers = [Linear(sizes[i], sizes[i + 1], rng, f"{name}.{i}")
                       for i in range(len(sizes) - 1)]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            act_mask = None
            if i + 1 < len(self.layers):
                act_mask = h > 0.0
                h = relu(h)
            caches.append((c, act_mask))
        return h, caches

    def backward(self, dy: np.ndarray, caches) -> np.ndarray:
        for i in reversed(range(len(self.layers))):
            c, act_mask = caches[i]
            if act_mask is not None:
                dy = dy * act_mask
            dy = self.layers[i].backward(dy, c)
        return dy


class GRUCell(Module):
    """Standard gated recurrent unit, tanh candidate, sigmoid gates."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator,
                 name: str = "gru"):
        self.n_in, self.n_hidden = n_in, n_hidden

        def mk(tag, rows):
            return Param(f"{name}.{tag}", uniform_init(rng, rows, (rows, n_hidden)))

        self.wz, self.uz = mk("wz", n_in), mk("uz", n_hidden)
        self.wr, self.ur = mk("wr", n_in), mk("ur", n_hidden)
        self.wh, self.uh = mk("wh", n_in), mk("uh", n_hidden)
        self.bz = Param(f"{name}.bz", np.zeros(n_hidden))
        self.br = Param(f"{name}.br", np.zeros(n_hidden))
        self.bh = Param(f"{name}.bh", np.zeros(n_hidden))

    def params(self):
        return [self.wz, self.uz, self.bz, self.wr, self.ur, self.br,
                self.wh, self.uh, self.bh]

    def forward(self, x: np.ndarray, h: np.ndarray):
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise ShapeError("GRU input/hidden size mismatch")
        z = sigmoid(x @ self.wz.value + h @ self.uz.value + self.bz.value)
        r = sigmoid(x @ self.wr.value + h @ self.ur.value + self.br.value)
        rh = r * h
        c = np.tanh(x @ self.wh.value + rh @ self.uh.value + self.bh.value)
        h_new = (1.0 - z) * h + z * c
        return h_new, (x, h, z, r, rh, c)

    def backward(self, dh_new: np.ndarray, cache):
        x, h, z, r, rh, c = cache
        dz = dh_new * (c - h)
        dc = dh_new * z
        dh = dh_new * (1.0 - z)

        dac = dc * (1.0 - c * c)
        self.wh.grad += np.outer(x, dac)
        self.bh.grad += dac
        drh = dac @ self.uh.value.T
        self.uh.grad += np.outer(rh, dac)
        dr = drh * h
        dh += drh * r
        dx = dac @ self.wh.value.T

        dar = dr * r * (1.0 - r)
        self.wr.grad += np.outer(x, dar)
        self.ur.grad += np.outer(h, dar)
        self.br.grad += dar
        dx += dar @ self.wr.value.T
        dh += dar @ self.ur.value.T

        daz = dz * z * (1.0 - z)
        self.wz.grad += np.outer(x, daz)
        self.uz.grad += np.outer(h, daz)
        self.bz.grad += daz
        dx += daz @ self.wz.value.T
        dh += daz @ self.uz.value.T
        return dx, dh


class AttentionUnit(Module):
    """Single-head scaled dot-product attention over a window of rows.

    Scores are divided by sqrt of the value width; rows flagged False in
    the mask are excluded as keys.  Output keeps one attended row per
    query position.
    """

    def __init__(self, n_in: int, n_att: int, rng: np.random.Generator,
                 name: str = "att"):
        self.n_in, self.n_att = n_in, n_att
        self.wq = Param(f"{name}.wq", uniform_init(rng, n_in, (n_in, n_att)))
        self.wk = Param(f"{name}.wk", uniform_init(rng, n_in, (n_in, n_att)))
        self.wv = Param(f"{name}.wv", uniform_init(rng, n_in, (n_in, n_att)))

    def params(self):
        return [self.wq, self.wk, self.wv]

    def forward(self, window: np.ndarray, mask: np.ndarray | None = None):
        window = np.asarray(window, float)
        if window.ndim != 2 or window.shape[0] == 0:
            raise ShapeError("attention window must be a nonempty 2-D array")
        q = window @ self.wq.value
        k = window @ self.wk.value
        v = window @ self.wv.value
        scores = q @ k.T / math.sqrt(self.n_att)
        if mask is not None:
            scores = np.where(mask[None, :], scores, -1e30)
        probs = softmax_rows(scores)
        out = probs @ v
        return out, (window, q, k, v, probs)

    def backward(self, dout: np.ndarray, cache):
        window, q, k, v, probs = cache
        dprobs = dout @ v.T
        dv = probs.T @ dout
        # softmax rows: dS = P * (dP - sum(dP * P))
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(self.n_att)
        dq = dscores @ k * scale
        dk = dscores.T @ q * scale
        self.wq.grad += window.T @ dq
        self.wk.grad += window.T @ dk
        self.wv.grad += window.T @ dv
        return dq @ self.wq.value.T + dk @ self.wk.value.T + dv @ self.wv.value.T


# Relative error floor: gradients smaller than this are compared on an
# absolute scale, which keeps pure round-off from reading as failure.
FD_REL_FLOOR = 1e-3


def finite_diff_check(loss_fn, params: list[Param], eps: float = 1e-6) -> float:
    """Worst-case central-difference error over every parameter entry.

    loss_fn must be a deterministic scalar function of the current
    parameter values.  Analytic gradients are read from each Param's
    grad array, so accumulate them before calling.
    """
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2.0 * eps)
            an = gflat[i]
            err = abs(fd - an) / max(abs(fd), abs(an), FD_REL_FLOOR)
            worst = max(worst, err)
    return worst


CHECKPOINT_VERSION = 1


def save_params(path, named_arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write a checkpoint: npz payload plus a JSON shape manifest."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "shapes": {k: list(v.shape) for k, v in named_arrays.items()},
        "meta": meta or {},
    }
    arrays = {f"param::{k}": np.asarray(v, float) for k, v in named_arrays.items()}
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint, validating the manifest against the payload."""
    with np.load(path) as data:
        raw = bytes(data["__manifest__"].tobytes())
        manifest = json.loads(raw.decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version "
                             f"{manifest.get('version')}")
        arrays = {}
        for key, shape in manifest["shapes"].items():
            arr = data[f"param::{key}"]
            if list(arr.shape) != shape:
                raise ShapeError(f"manifest mismatch for {key}")
            arrays[key] = arr.astype(float)
    return arrays, manifest.get("meta", {})
