"""Range-sum measurement generation and target position estimation.

Each passive UAV measures the total path length active -> target ->
passive.  The ground station stacks those range sums and solves a small
nonlinear least-squares problem for the target coordinates with a
damped Gauss-Newton (Levenberg-Marquardt) iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import Vec3


class PositioningError(ValueError):
    pass


@dataclass(frozen=True)
class RangeMeasurement:
    uav_index: int
    range_sum: float        # true m, meters
    variance: float         # measurement variance, m^2
    measured: float         # noisy range sum, meters
    delay: float            # propagation delay, seconds

    def __post_init__(self):
        if self.range_sum <= 0:
            raise PositioningError("range sum must be positive")
        if self.variance <= 0:
            raise PositioningError("variance must be positive")


@dataclass
class PositionEstimate:
    position: Vec3
    residual_norm: float
    iterations: int
    converged: bool
    degenerate: bool = False


def true_range_sum(q0, qk, u, light_speed: float = 3.0e8) -> tuple[float, float]:
    """Total two-leg path length and its propagation delay."""
    q0 = np.asarray(q0, float)
    qk = np.asarray(qk, float)
    u = np.asarray(u, float)
    d0 = float(np.linalg.norm(q0 - u))
    dk = float(np.linalg.norm(u - qk))
    if d0 == 0.0 or dk == 0.0:
        raise PositioningError("coincident points give a degenerate range sum")
    m = d0 + dk
    return m, m / light_speed


def sample_range(m: float, snr: float, rng: np.random.Generator,
                 variance_scale: float = 1.0, uav_index: int = 0,
                 light_speed: float = 3.0e8) -> RangeMeasurement | None:
    """Draw a noisy range sum with variance variance_scale / snr.

    Returns None when the SNR is zero (no usable echo this slot).
    """
    if snr < 0:
        raise PositioningError("snr must be nonnegative")
    if snr == 0.0:
        return None
    var = variance_scale / snr
    noisy = m + rng.normal(0.0, math.sqrt(var))
    return RangeMeasurement(uav_index=uav_index, range_sum=m, variance=var,
                            measured=noisy, delay=m / light_speed)


def _residuals(u: Vec3, measured: np.ndarray, q0: Vec3, qs: np.ndarray) -> np.ndarray:
    d0 = np.linalg.norm(q0 - u)
    dk = np.linalg.norm(qs - u[None, :], axis=1)
    return measured - (d0 + dk)


def _jacobian(u: Vec3, q0: Vec3, qs: np.ndarray) -> np.ndarray:
    diff0 = u - q0
    d0 = np.linalg.norm(diff0)
    diffk = u - qs
    dk = np.linalg.norm(diffk, axis=1)
    # residual r = measured - (d0 + dk) so dr/du = -(unit0 + unitk)
    return -(diff0 / d0 + (diffk.T / dk).T)


def linear_bootstrap(measured: np.ndarray, q0: Vec3,
                     qs: np.ndarray) -> Vec3 | None:
    """Closed-form start point: subtracting the active-leg equation from
    each squared range sum leaves equations linear in (u, d0).

    Returns None when the system is too ill-conditioned to trust.
    """
    n = len(measured)
    if n < 4:
        return None
    a = np.zeros((n, 4))
    b = np.zeros(n)
    for k in range(n):
        a[k, :3] = 2.0 * (q0 - qs[k])
        a[k, 3] = 2.0 * measured[k]
        b[k] = measured[k] ** 2 - qs[k] @ qs[k] + q0 @ q0
    try:
        sol, _, rank, sv = np.linalg.lstsq(a, b, rcond=None)
    except np.linalg.LinAlgError:
        return None
    if rank < 4 or sv[-1] < 1e-9 * sv[0]:
        return None
    return sol[:3]


def _lm_descend(measured, q0, qs, start, step_tol, max_iter, rank_tol):
    u = np.asarray(start, float).copy()
    lam = 1e-3
    r = _residuals(u, measured, q0, qs)
    cost = float(r @ r)
    converged = False
    degenerate = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        jac = _jacobian(u, q0, qs)
        if np.linalg.matrix_rank(jac, tol=rank_tol) < 3:
            degenerate = True
        hess = jac.T @ jac + lam * np.eye(3)
        grad = jac.T @ r
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            degenerate = True
            break
        if np.linalg.norm(step) < step_tol:
            converged = True
            break
        trial = u + step
        r_trial = _residuals(trial, measured, q0, qs)
        cost_trial = float(r_trial @ r_trial)
        if cost_trial < cost:
            u, r, cost = trial, r_trial, cost_trial
            lam = max(lam * 0.3, 1e-12)
        else:
            lam *= 3.0
            if lam > 1e12:
                break
    return PositionEstimate(position=u, residual_norm=math.sqrt(cost),
                            iterations=iterations, converged=converged,
                            degenerate=degenerate)


def estimate_position(measurements, q0, passive_positions, prior,
                      step_tol: float = 1e-9, max_iter: int = 100,
                      rank_tol: float = 1e-8) -> PositionEstimate:
    """Least-squares target fix from range-sum measurements.

    measurements may be RangeMeasurement objects or bare floats (the
    measured sums); passive_positions rows must align with them.  Damped
    Gauss-Newton runs from the prior and, because the range-sum cost has
    local minima when the prior is far off, also from the linear
    bootstrap when four measurements allow one; the lower final cost
    wins.
    """
    measured = np.array([m.measured if isinstance(m, RangeMeasurement) else float(m)
                         for m in measurements])
    qs = np.asarray(passive_positions, float).reshape(len(measured), 3)
    if len(measured) < 1:
        raise PositioningError("need at least one measurement")
    q0 = np.asarray(q0, float)

    starts = [np.asarray(prior, float)]
    boot = linear_bootstrap(measured, q0, qs)
    if boot is not None and np.all(np.isfinite(boot)):
        starts.append(boot)
    best = None
    for start in starts:
        est = _lm_descend(measured, q0, qs, start, step_tol, max_iter, rank_tol)
        if best is None or est.residual_norm < best.residual_norm:
            best = est
    return best


def position_error(estimate, truth) -> float:
    """Euclidean distance between estimated and true target positions."""
    e = np.asarray(estimate, float) - np.asarray(truth, float)
    return float(np.sqrt(e @ e))
