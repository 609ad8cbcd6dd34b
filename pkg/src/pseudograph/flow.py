"""Hamiltonian flow of points, clouds, tangent vectors and loops.

Positions are integrated in the universal cover R^d, so every flowed point
keeps its integer lift; torus representatives are taken only on export.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .cloud import PhasePointCloud
from .errors import EnergyDriftExceeded, FlowDivergence, LoopNotClosed, StepFailure
from .hamiltonian import TonelliHamiltonian

MAX_ABS_TIME = 10.0


@dataclass(frozen=True)
class FlowConfig:
    method: str = "rk45_adaptive"
    step: float = 1e-3
    tolerance: float = 1e-10
    energy_drift_cap: float = 1e-8

    def __post_init__(self):
        if self.method not in ("rk4_fixed", "rk45_adaptive"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if not (self.step > 0 and self.tolerance > 0 and self.energy_drift_cap > 0):
            raise ValueError("step, tolerance and energy_drift_cap must be positive")


@dataclass(frozen=True)
class TangentVector:
    dq: np.ndarray
    dp: np.ndarray


def _hamilton_rhs(H: TonelliHamiltonian, d: int):
    def rhs(y):
        q, p = y[..., :d], y[..., d:]
        return np.concatenate([H.grad_p(q, p), -H.grad_q(q, p)], axis=-1)

    return rhs


def _variational_rhs(H: TonelliHamiltonian, d: int):
    def rhs(y):
        q, p = y[..., :d], y[..., d:2 * d]
        dq, dp = y[..., 2 * d:3 * d, None], y[..., 3 * d:, None]
        hpp, hqq, hqp = H.hess_pp(q, p), H.hess_qq(q, p), H.hess_qp(q, p)
        hpq = np.swapaxes(hqp, -1, -2)
        ddq = (hpq @ dq + hpp @ dp)[..., 0]
        ddp = -(hqq @ dq + hqp @ dp)[..., 0]
        return np.concatenate([H.grad_p(q, p), -H.grad_q(q, p), ddq, ddp], axis=-1)

    return rhs


def _rk4(rhs, y0: np.ndarray, times: np.ndarray, step: float) -> np.ndarray:
    out = np.empty((len(times),) + y0.shape)
    y, t = y0.copy(), 0.0
    for k, target in enumerate(times):
        span = target - t
        n = max(1, int(math.ceil(abs(span) / step - 1e-9)))
        h = span / n
        for _ in range(n):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * h * k1)
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = target
        out[k] = y
    return out


def _integrate(rhs, y0: np.ndarray, times, cfg: FlowConfig) -> np.ndarray:
    """States at each of ``times`` (all of one sign, sorted by magnitude)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(np.abs(times) > MAX_ABS_TIME):
        raise ValueError(f"|t| must not exceed {MAX_ABS_TIME}")
    if y0.size == 0:
        return np.empty((len(times),) + y0.shape)
    t_end = times[np.argmax(np.abs(times))]
    if t_end == 0.0:
        out = np.broadcast_to(y0, (len(times),) + y0.shape).copy()
    elif cfg.method == "rk4_fixed":
        out = _rk4(rhs, y0, times, cfg.step)
    else:
        shape = y0.shape
        # solve_ivp controls an RMS error over the whole batch; shrink the
        # tolerance so that it bounds every single trajectory
        rtol = max(cfg.tolerance / math.sqrt(y0.size), 3e-14)
        sol = solve_ivp(lambda _, y: rhs(y.reshape(shape)).ravel(), (0.0, t_end), y0.ravel(),
                        method="RK45", t_eval=times, rtol=rtol, atol=rtol * 1e-2)
        if sol.status != 0:
            raise StepFailure(f"integrator failed: {sol.message}")
        out = sol.y.T.reshape((len(times),) + shape)
    if not np.all(np.isfinite(out)):
        raise FlowDivergence("non-finite state during integration")
    return out


def _check_energy(H, q0, p0, q1, p1, t, cfg):
    drift = np.abs(H.value(q1, p1) - H.value(q0, p0))
    cap = cfg.energy_drift_cap * max(1.0, abs(t))
    if drift.size and np.max(drift) > cap:
        worst = int(np.argmax(drift))
        raise EnergyDriftExceeded(
            f"energy drift {drift.flat[worst]:.3e} exceeds cap {cap:.1e} at point {worst}")


def flow_points(H: TonelliHamiltonian, q, p, t: float, cfg: FlowConfig | None = None):
    """Flow arrays of points ``(n, d)`` by time ``t``; returns lifted ``(q, p)``."""
    cfg = cfg or FlowConfig()
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    d = H.dim
    y0 = np.concatenate([q, p], axis=-1)
    y = _integrate(_hamilton_rhs(H, d), y0, [t], cfg)[0]
    q1, p1 = y[..., :d], y[..., d:]
    _check_energy(H, q, p, q1, p1, t, cfg)
    return q1, p1


def flow_trajectories(H: TonelliHamiltonian, q, p, times, cfg: FlowConfig | None = None):
    """Positions and momenta at every time in ``times``: arrays ``(len(times), n, d)``."""
    cfg = cfg or FlowConfig()
    times = np.asarray(times, dtype=float)
    d = H.dim
    y0 = np.concatenate([np.asarray(q, float), np.asarray(p, float)], axis=-1)
    ys = _integrate(_hamilton_rhs(H, d), y0, times, cfg)
    qs, ps = ys[..., :d], ys[..., d:]
    _check_energy(H, y0[..., :d], y0[..., d:], qs[-1], ps[-1], times[-1], cfg)
    return qs, ps


def flow_point(H: TonelliHamiltonian, x, t: float, cfg: FlowConfig | None = None):
    """Image of one phase point ``x = (q, p)``; the returned ``q`` is a lift (reduce with ``% 1``)."""
    q, p = x
    q1, p1 = flow_points(H, np.atleast_1d(np.asarray(q, float))[None],
                         np.atleast_1d(np.asarray(p, float))[None], t, cfg)
    return q1[0], p1[0]


def flow_cloud(H: TonelliHamiltonian, cloud: PhasePointCloud, t: float,
               cfg: FlowConfig | None = None) -> PhasePointCloud:
    if len(cloud) == 0 or t == 0.0:
        return cloud.with_points(cloud.q.copy(), cloud.p.copy(), cloud.source_time + t)
    try:
        q1, p1 = flow_points(H, cloud.q, cloud.p, t, cfg)
    except EnergyDriftExceeded as exc:
        raise EnergyDriftExceeded(f"flow_cloud: {exc}") from exc
    return cloud.with_points(q1, p1, cloud.source_time + t)


def tangent_flow_batch(H: TonelliHamiltonian, q, p, dq, dp, t: float,
                       cfg: FlowConfig | None = None):
    """Joint integration of points and the linearized Hamilton equations."""
    cfg = cfg or FlowConfig()
    d = H.dim
    y0 = np.concatenate([np.asarray(a, float) for a in (q, p, dq, dp)], axis=-1)
    y = _integrate(_variational_rhs(H, d), y0, [t], cfg)[0]
    _check_energy(H, y0[..., :d], y0[..., d:2 * d], y[..., :d], y[..., d:2 * d], t, cfg)
    return y[..., 2 * d:3 * d], y[..., 3 * d:]


def tangent_flow(H: TonelliHamiltonian, x, dx: TangentVector, t: float,
                 cfg: FlowConfig | None = None) -> TangentVector:
    q, p = (np.atleast_1d(np.asarray(a, float))[None] for a in x)
    dq, dp = (np.atleast_1d(np.asarray(a, float))[None] for a in (dx.dq, dx.dp))
    if not (np.all(np.isfinite(dq)) and np.all(np.isfinite(dp))):
        raise ValueError("tangent vector must be finite")
    rq, rp = tangent_flow_batch(H, q, p, dq, dp, t, cfg)
    return TangentVector(rq[0], rp[0])


@dataclass(frozen=True)
class PhaseLoop:
    """Cyclic samples of a closed curve in T*T^d.

    Samples are listed once (no repeated endpoint); the curve closes from the
    last sample back to ``q[0] + winding``.
    """

    q: np.ndarray
    p: np.ndarray
    winding: tuple

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.ndim == 1:
            q, p = q[:, None], p[:, None]
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "winding", tuple(int(w) for w in np.atleast_1d(self.winding)))

    def increments(self) -> np.ndarray:
        closed = np.vstack([self.q, self.q[:1] + np.asarray(self.winding, float)])
        return np.diff(closed, axis=0)


def loop_action(loop: PhaseLoop) -> float:
    """Trapezoidal value of the Liouville integral of p dq around the loop."""
    if len(loop.q) < 2:
        raise LoopNotClosed("a loop needs at least two samples")
    dq = loop.increments()
    gaps = np.max(np.abs(dq), axis=1)
    if gaps[-1] >= 0.5:
        raise LoopNotClosed(f"closing gap {gaps[-1]:.3g} is not below 1/2 for winding {loop.winding}")
    if np.any(gaps[:-1] >= 0.5):
        raise LoopNotClosed("consecutive samples are 1/2 or more apart")
    p_next = np.roll(loop.p, -1, axis=0)
    return float(np.sum(0.5 * (loop.p + p_next) * dq))


def flow_loop(H: TonelliHamiltonian, loop: PhaseLoop, t: float, cfg: FlowConfig | None = None) -> PhaseLoop:
    q1, p1 = flow_points(H, loop.q, loop.p, t, cfg)
    return PhaseLoop(q1, p1, loop.winding)


def subdivide_loop(loop: PhaseLoop, factor: int) -> PhaseLoop:
    """Insert ``factor - 1`` equispaced points on every chord of the polygon."""
    dq = loop.increments()
    dp = np.roll(loop.p, -1, axis=0) - loop.p
    s = np.arange(factor)[None, :, None] / factor
    d = loop.q.shape[1]
    q = (loop.q[:, None, :] + s * dq[:, None, :]).reshape(-1, d)
    p = (loop.p[:, None, :] + s * dp[:, None, :]).reshape(-1, d)
    return PhaseLoop(q, p, loop.winding)


def symplectic_loop_invariance_check(H: TonelliHamiltonian, loop: PhaseLoop, t: float,
                                     cfg: FlowConfig | None = None, *, max_gap: float = 0.05,
                                     max_factor: int = 256) -> float:
    """|action(phi_t(loop)) - action(loop)| for the polygon through the samples.

    The trapezoidal action of the samples is the exact action of their
    polygon.  Its image under the flow is curved, so the polygon is
    subdivided until flowed neighbours are ``max_gap`` apart, and the
    factors r and 2r are combined by Richardson extrapolation (the chord
    error is O(r^-2)).
    """
    before = loop_action(loop)
    factor = 1
    while True:
        image = flow_loop(H, subdivide_loop(loop, factor), t, cfg)
        if np.max(np.abs(image.increments())) <= max_gap or factor >= max_factor:
            break
        factor *= 2
    coarse = loop_action(image)
    fine = loop_action(flow_loop(H, subdivide_loop(loop, 2 * factor), t, cfg))
    return abs((4.0 * fine - coarse) / 3.0 - before)
