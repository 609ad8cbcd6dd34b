"""Tonelli Hamiltonians on the flat torus T^d = R^d / Z^d, d in {1, 2}.

A Hamiltonian is a bundle of closed-form callables.  All callables are
vectorized: ``q`` and ``p`` are arrays of shape ``(..., d)``; scalars come
back with shape ``(...)``, gradients with ``(..., d)`` and Hessians with
``(..., d, d)``.  Positions are always *lifted* coordinates in R^d, the
Hamiltonian being 1-periodic in each of them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigInvalid, LegendreNoConvergence, NonConvexHamiltonian

TWO_PI = 2.0 * math.pi

Scalar = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TonelliHamiltonian:
    name: str
    dim: int
    value: Scalar
    grad_q: Scalar
    grad_p: Scalar
    hess_pp: Scalar
    # hess_qp[..., i, j] = d^2 H / dq_i dp_j
    hess_qq: Scalar
    hess_qp: Scalar
    q_independent: bool = False
    params: dict = field(default_factory=dict)

    def energy(self, q, p):
        return self.value(np.asarray(q, float), np.asarray(p, float))


@dataclass(frozen=True)
class CompactTube:
    """All of T^d times the closed momentum ball of radius ``fiber_radius``."""

    fiber_radius: float

    def __post_init__(self):
        if not self.fiber_radius > 0:
            raise ValueError("fiber_radius must be positive")


def _eye(shape, d):
    return np.broadcast_to(np.eye(d), tuple(shape) + (d, d)).copy()


def free(dim: int = 1) -> TonelliHamiltonian:
    """H = |p|^2 / 2."""

    def value(q, p):
        return 0.5 * np.sum(p * p, axis=-1)

    return TonelliHamiltonian(
        name="free",
        dim=dim,
        value=value,
        grad_q=lambda q, p: np.zeros_like(p),
        grad_p=lambda q, p: np.array(p, dtype=float, copy=True),
        hess_pp=lambda q, p: _eye(np.shape(p)[:-1], dim),
        hess_qq=lambda q, p: np.zeros(np.shape(p)[:-1] + (dim, dim)),
        hess_qp=lambda q, p: np.zeros(np.shape(p)[:-1] + (dim, dim)),
        q_independent=True,
        params={},
    )


def pendulum(dim: int = 1, amplitude: float = 1.0) -> TonelliHamiltonian:
    """Mechanical Hamiltonian H = |p|^2 / 2 + A * sum_j cos(2 pi q_j)."""
    a = float(amplitude)

    def value(q, p):
        return 0.5 * np.sum(p * p, axis=-1) + a * np.sum(np.cos(TWO_PI * q), axis=-1)

    def grad_q(q, p):
        return -a * TWO_PI * np.sin(TWO_PI * q) + 0.0 * p

    def hess_qq(q, p):
        diag = -a * TWO_PI**2 * np.cos(TWO_PI * q) + 0.0 * p
        out = np.zeros(diag.shape + (dim,))
        idx = np.arange(dim)
        out[..., idx, idx] = diag
        return out

    return TonelliHamiltonian(
        name="pendulum",
        dim=dim,
        value=value,
        grad_q=grad_q,
        grad_p=lambda q, p: np.array(p, dtype=float, copy=True),
        hess_pp=lambda q, p: _eye(np.shape(p)[:-1], dim),
        hess_qq=hess_qq,
        hess_qp=lambda q, p: np.zeros(np.shape(p)[:-1] + (dim, dim)),
        q_independent=False,
        params={"amplitude": a},
    )


def quartic(dim: int = 1, eps: float = 0.1) -> TonelliHamiltonian:
    """H = |p|^2 / 2 + eps |p|^4, a non-quadratic convex kinetic energy."""
    e = float(eps)

    def value(q, p):
        s = np.sum(p * p, axis=-1)
        return 0.5 * s + e * s * s

    def grad_p(q, p):
        s = np.sum(p * p, axis=-1, keepdims=True)
        return p * (1.0 + 4.0 * e * s)

    def hess_pp(q, p):
        s = np.sum(p * p, axis=-1)
        out = _eye(np.shape(p)[:-1], dim) * (1.0 + 4.0 * e * s)[..., None, None]
        return out + 8.0 * e * p[..., :, None] * p[..., None, :]

    return TonelliHamiltonian(
        name="quartic",
        dim=dim,
        value=value,
        grad_q=lambda q, p: np.zeros_like(p),
        grad_p=grad_p,
        hess_pp=hess_pp,
        hess_qq=lambda q, p: np.zeros(np.shape(p)[:-1] + (dim, dim)),
        hess_qp=lambda q, p: np.zeros(np.shape(p)[:-1] + (dim, dim)),
        q_independent=True,
        params={"eps": e},
    )


CATALOG = {"free": free, "pendulum": pendulum, "quartic": quartic}


def make_hamiltonian(name: str, dim: int = 1, **params) -> TonelliHamiltonian:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise ConfigInvalid(f"unknown Hamiltonian {name!r}; known: {sorted(CATALOG)}") from None
    if dim not in (1, 2):
        raise ConfigInvalid("only d = 1 and d = 2 are supported")
    try:
        return factory(dim, **params)
    except TypeError as exc:
        raise ConfigInvalid(f"bad parameters for {name!r}: {exc}") from None


def velocity(H: TonelliHamiltonian, q, p) -> np.ndarray:
    """Hamilton's equation for the base: dq/dt = dH/dp."""
    return H.grad_p(np.asarray(q, float), np.asarray(p, float))


def lagrangian_value(H: TonelliHamiltonian, q, v, *, max_iter: int = 100, tol: float = 1e-13):
    """Legendre dual L(q, v) = sup_p [p.v - H(q, p)] and its maximizer.

    Solves grad_p H(q, p) = v by damped Newton from p = 0, vectorized over the
    leading axes.  Returns ``(L, p)``.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    q, v = np.broadcast_arrays(q, v)
    p = np.zeros_like(v)

    def objective(pp):
        return np.sum(pp * v, axis=-1) - H.value(q, pp)

    scale = 1.0 + np.max(np.abs(v), axis=-1)
    phi = objective(p)
    for _ in range(max_iter):
        residual = v - H.grad_p(q, p)
        if np.all(np.max(np.abs(residual), axis=-1) <= tol * scale):
            break
        step = np.linalg.solve(H.hess_pp(q, p), residual[..., None])[..., 0]
        # halve the step wherever the concave objective would decrease
        lam = np.ones(phi.shape)
        for _ in range(40):
            trial = p + lam[..., None] * step
            phi_trial = objective(trial)
            bad = phi_trial < phi - 1e-14 * (1.0 + np.abs(phi))
            if not np.any(bad):
                break
            lam = np.where(bad, 0.5 * lam, lam)
        p = trial
        phi = phi_trial
    else:
        residual = v - H.grad_p(q, p)
        if not np.all(np.max(np.abs(residual), axis=-1) <= 1e3 * tol * scale):
            raise LegendreNoConvergence(
                f"Legendre transform did not converge (max residual {np.max(np.abs(residual)):.3e})"
            )
    return objective(p), p


def lagrangian_derivatives(H: TonelliHamiltonian, q, v):
    """L, L_q, L_v, L_qq, L_qv, L_vv at (q, v), from H at the dual momentum.

    Uses L_v = p, L_q = -H_q and the implicit-function identities for the
    second derivatives.  L_qv[..., i, j] = d^2 L / dq_i dv_j.
    """
    L, p = lagrangian_value(H, q, v)
    q = np.broadcast_to(np.asarray(q, float), p.shape)
    hpp_inv = np.linalg.inv(H.hess_pp(q, p))
    hqp = H.hess_qp(q, p)
    L_q = -H.grad_q(q, p)
    L_vv = hpp_inv
    # dp/dq = -H_pp^{-1} H_pq, with H_pq = H_qp^T
    dp_dq = -hpp_inv @ np.swapaxes(hqp, -1, -2)
    L_qv = np.swapaxes(dp_dq, -1, -2)
    L_qq = -H.hess_qq(q, p) - hqp @ dp_dq
    return L, L_q, p, L_qq, L_qv, L_vv


def _tube_samples(dim: int, radius: float, density: int):
    """Base grid times momentum lattice {k / density} inside the ball.

    The momentum lattice does not depend on the radius, so tubes are nested
    as samples and the bounds are monotone in the radius.  In two dimensions
    the product grid would hold density^4 points, so the per-axis density
    is divided by four (never below 8).
    """
    if dim == 2:
        density = max(8, int(density) // 4)
    nq = max(int(density), 1)
    kmax = int(math.floor(radius * density + 1e-12))
    ks = np.arange(-kmax, kmax + 1) / density
    qs = np.arange(nq) / nq
    if dim == 1:
        Q, P = np.meshgrid(qs, ks, indexing="ij")
        return Q.reshape(-1, 1), P.reshape(-1, 1)
    P1, P2 = np.meshgrid(ks, ks, indexing="ij")
    mask = P1**2 + P2**2 <= radius**2 * (1 + 1e-12)
    pp = np.stack([P1[mask], P2[mask]], axis=-1)
    Q1, Q2 = np.meshgrid(qs, qs, indexing="ij")
    qq = np.stack([Q1.ravel(), Q2.ravel()], axis=-1)
    q = np.repeat(qq, len(pp), axis=0)
    p = np.tile(pp, (len(qq), 1))
    return q, p


def hessian_bounds(H: TonelliHamiltonian, tube: CompactTube, flow_cfg=None,
                   sample_density: int = 32, tau_step: float = 0.05):
    """Sampled bounds ``(c, C)`` on the fiber Hessian along orbits of the tube.

    ``c`` and ``C`` are the extreme eigenvalues of ``H_pp(phi_tau(x))`` over a
    grid of tube points ``x`` and times ``tau`` in [-1, 1].
    """
    from .flow import FlowConfig, flow_trajectories

    if not tube.fiber_radius > 0:
        raise ValueError("tube.fiber_radius must be positive")
    if sample_density < 8:
        raise ValueError("sample_density must be at least 8 points per unit")
    cfg = flow_cfg or FlowConfig()
    q0, p0 = _tube_samples(H.dim, tube.fiber_radius, sample_density)
    n_tau = int(round(1.0 / tau_step))
    taus = np.linspace(0.0, 1.0, n_tau + 1)
    lo, hi = math.inf, -math.inf
    for sign in (1.0, -1.0):
        if H.q_independent:
            # momentum is conserved, the orbit only moves the base point
            qs, ps = q0[None], p0[None]
        else:
            qs, ps = flow_trajectories(H, q0, p0, sign * taus, cfg)
        eig = np.linalg.eigvalsh(H.hess_pp(qs, ps))
        lo = min(lo, float(eig.min()))
        hi = max(hi, float(eig.max()))
    if not lo > 0:
        raise NonConvexHamiltonian(f"fiber Hessian eigenvalue {lo:.3e} <= 0 on the tube")
    return lo, hi


def check_derivatives(H: TonelliHamiltonian, q, p, step: float = 1e-4) -> float:
    """Largest relative mismatch between the supplied derivatives and finite differences of ``value``."""
    q = np.atleast_2d(np.asarray(q, float))
    p = np.atleast_2d(np.asarray(p, float))
    d = H.dim
    worst = 0.0

    def rel(a, b):
        return np.max(np.abs(a - b) / (1.0 + np.abs(b)))

    eye = np.eye(d) * step
    gp = np.stack([(H.value(q, p + eye[i]) - H.value(q, p - eye[i])) / (2 * step) for i in range(d)], -1)
    gq = np.stack([(H.value(q + eye[i], p) - H.value(q - eye[i], p)) / (2 * step) for i in range(d)], -1)
    worst = max(worst, rel(H.grad_p(q, p), gp), rel(H.grad_q(q, p), gq))
    hpp = np.stack([(H.grad_p(q, p + eye[j]) - H.grad_p(q, p - eye[j])) / (2 * step) for j in range(d)], -1)
    hqq = np.stack([(H.grad_q(q + eye[j], p) - H.grad_q(q - eye[j], p)) / (2 * step) for j in range(d)], -1)
    hqp = np.stack([(H.grad_q(q, p + eye[j]) - H.grad_q(q, p - eye[j])) / (2 * step) for j in range(d)], -1)
    worst = max(worst, rel(H.hess_pp(q, p), hpp), rel(H.hess_qq(q, p), hqq), rel(H.hess_qp(q, p), hqp))
    return float(worst)
