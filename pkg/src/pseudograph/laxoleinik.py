"""Lax-Oleinik semigroups by direct minimization of a discretized action.

    T_t u(x)  = min_y [u(y) + h_t(y, x)]        (negative semigroup)
    Ť_t u(x)  = max_y [u(y) - h_t(x, y)]        (positive semigroup)

where h_t(x, y) is the least Lagrangian action of a curve from x to y in
time t on the torus.  Curves are piecewise linear in lifted coordinates with
N segments, and the action is the midpoint-rule sum of tau * L(midpoint,
velocity) with tau = t / N.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .cloud import min_lift
from .errors import ActionNoConvergence, TimeTooLarge
from .hamiltonian import TonelliHamiltonian, lagrangian_derivatives, lagrangian_value
from .semiconcave import MinBranchFunction, evaluate

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ActionPath:
    """Piecewise-linear curve through ``nodes`` (lifted, endpoints included)."""

    x: np.ndarray
    y: np.ndarray
    t: float
    nodes: np.ndarray

    @property
    def N(self) -> int:
        return len(self.nodes) - 1


@dataclass(frozen=True)
class SectionSamples:
    """Values (and optionally covectors) of a function on the regular grid i / n."""

    grid_n: int
    dim: int
    values: np.ndarray
    t: float = 0.0
    covectors: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("section values must be finite")
        if self.covectors is not None and not np.all(np.isfinite(self.covectors)):
            raise ValueError("section covectors must be finite")

    @property
    def spacing(self) -> float:
        return 1.0 / self.grid_n

    def nodes(self) -> np.ndarray:
        """Grid nodes, flattened to shape (n^d, d) in lexicographic order."""
        return grid_nodes(self.grid_n, self.dim)

    def flat_values(self) -> np.ndarray:
        return np.asarray(self.values).reshape(-1)

    def flat_covectors(self) -> np.ndarray:
        return np.asarray(self.covectors).reshape(-1, self.dim)

    def interpolant(self):
        """Periodic interpolant of the values: cubic spline (d = 1) or bilinear (d = 2)."""
        n = self.grid_n
        axis = np.arange(n + 1) / n
        if self.dim == 1:
            vals = np.append(self.values, self.values[0])
            spline = CubicSpline(axis, vals, bc_type="periodic")
            return lambda q: spline(np.mod(np.asarray(q, float).reshape(-1), 1.0))
        padded = np.pad(np.asarray(self.values), ((0, 1), (0, 1)), mode="wrap")
        rgi = RegularGridInterpolator((axis, axis), padded)
        return lambda q: rgi(np.mod(np.asarray(q, float).reshape(-1, 2), 1.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        d = self.dim
        header = [f"q{i + 1}" for i in range(d)] + ["value"]
        if self.covectors is not None:
            header += [f"p{i + 1}" for i in range(d)]
        w.writerow(header + ["t"])
        cov = self.flat_covectors() if self.covectors is not None else None
        for k, (q, v) in enumerate(zip(self.nodes(), self.flat_values())):
            row = [repr(float(c)) for c in q] + [repr(float(v))]
            if cov is not None:
                row += [repr(float(c)) for c in cov[k]]
            w.writerow(row + [repr(float(self.t))])
        return buf.getvalue()


def grid_nodes(n: int, d: int) -> np.ndarray:
    axis = np.arange(n) / n
    return np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)


def default_substeps(t: float) -> int:
    return max(4, int(math.ceil(t / 0.05 - 1e-12)))


# ---------------------------------------------------------------------------
# discrete action


def _action_terms(H: TonelliHamiltonian, Z: np.ndarray, tau: float, hessian: bool):
    """Action, gradient and (optionally) Hessian with respect to interior nodes.

    ``Z`` holds full paths, shape (B, N + 1, d).
    """
    B, n1, d = Z.shape
    N = n1 - 1
    mid = 0.5 * (Z[:, :-1] + Z[:, 1:])
    vel = np.diff(Z, axis=1) / tau
    L, L_q, L_v, L_qq, L_qv, L_vv = lagrangian_derivatives(H, mid, vel)
    A = tau * np.sum(L, axis=1)
    g = np.zeros_like(Z)
    g[:, :-1] += 0.5 * tau * L_q - L_v
    g[:, 1:] += 0.5 * tau * L_q + L_v
    grad = g[:, 1:-1]
    if not hessian:
        return A, grad, None
    a, b = 0.5, 1.0 / tau
    L_vq = np.swapaxes(L_qv, -1, -2)
    h_aa = tau * (a * a * L_qq - a * b * (L_qv + L_vq) + b * b * L_vv)
    h_ab = tau * (a * a * L_qq + a * b * L_qv - a * b * L_vq - b * b * L_vv)
    h_bb = tau * (a * a * L_qq + a * b * (L_qv + L_vq) + b * b * L_vv)
    full = np.zeros((B, n1, d, n1, d))
    idx = np.arange(N)
    full[:, idx, :, idx, :] += np.moveaxis(h_aa, 1, 0)
    full[:, idx, :, idx + 1, :] += np.moveaxis(h_ab, 1, 0)
    full[:, idx + 1, :, idx, :] += np.moveaxis(np.swapaxes(h_ab, -1, -2), 1, 0)
    full[:, idx + 1, :, idx + 1, :] += np.moveaxis(h_bb, 1, 0)
    inner = full[:, 1:-1, :, 1:-1, :].reshape(B, (N - 1) * d, (N - 1) * d)
    return A, grad, inner


def _minimize_paths(H, X, Y, t, N, max_iter=60, gtol=1e-10):
    """Damped Newton descent of the discrete action from straight-line paths."""
    B, d = X.shape
    tau = t / N
    s = np.linspace(0.0, 1.0, N + 1)[None, :, None]
    Z = X[:, None, :] + s * (Y - X)[:, None, :]
    if N == 1:
        A, _, _ = _action_terms(H, Z, tau, hessian=False)
        return A, Z
    A, grad, hess = _action_terms(H, Z, tau, hessian=True)
    for _ in range(max_iter):
        gnorm = np.max(np.abs(grad.reshape(B, -1)), axis=1)
        scale = 1.0 + np.max(np.abs(Y - X), axis=1) / t
        todo = gnorm > gtol * scale
        if not np.any(todo):
            return A, Z
        eig_min = np.linalg.eigvalsh(hess[todo])[:, 0]
        shift = np.maximum(0.0, -eig_min + 1e-8 * (1.0 + np.abs(eig_min)))
        dim = hess.shape[-1]
        system = hess[todo] + shift[:, None, None] * np.eye(dim)
        step = -np.linalg.solve(system, grad[todo].reshape(-1, dim, 1))[..., 0]
        step = step.reshape(-1, N - 1, d)
        lam = np.ones(len(step))
        z_old = Z[todo]
        a_old = A[todo]
        slope = np.sum(step.reshape(len(step), -1) * grad[todo].reshape(len(step), -1), axis=1)
        for _ in range(30):
            trial = z_old.copy()
            trial[:, 1:-1] += lam[:, None, None] * step
            a_new, _, _ = _action_terms(H, trial, tau, hessian=False)
            bad = a_new > a_old + 1e-4 * lam * slope + 1e-15 * (1 + np.abs(a_old))
            if not np.any(bad):
                break
            lam = np.where(bad, 0.5 * lam, lam)
        Z[todo] = trial
        A_t, g_t, h_t = _action_terms(H, Z[todo], tau, hessian=True)
        A[todo], grad[todo], hess[todo] = A_t, g_t, h_t
    gnorm = np.max(np.abs(grad.reshape(B, -1)), axis=1)
    scale = 1.0 + np.max(np.abs(Y - X), axis=1) / t
    if np.any(gnorm > 1e3 * gtol * scale):
        raise ActionNoConvergence(f"action descent stalled (gradient {gnorm.max():.3e})")
    return A, Z


def _lifts(d: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=float)


def action_values(H: TonelliHamiltonian, X, Y, t: float, N: int | None = None):
    """h_t for many pairs at once: minimum over the lifts of ``Y`` within one winding.

    Returns ``(h, lifted_endpoint)``.  For a Hamiltonian that does not depend
    on q the straight segment is optimal (Jensen), so the action is t L(v).
    """
    _check_time(t)
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    d = X.shape[-1]
    N = N or default_substeps(t)
    Y0 = X + min_lift(Y - X)
    lifts = _lifts(d)
    Xs = np.repeat(X[:, None, :], len(lifts), axis=1).reshape(-1, d)
    Ys = (Y0[:, None, :] + lifts[None]).reshape(-1, d)
    if H.q_independent:
        L, _ = lagrangian_value(H, np.zeros_like(Xs), (Ys - Xs) / t)
        A = t * L
    else:
        A, _ = _minimize_paths(H, Xs, Ys, t, N)
    A = A.reshape(len(X), len(lifts))
    best = np.argmin(A, axis=1)
    rows = np.arange(len(X))
    return A[rows, best], Ys.reshape(len(X), len(lifts), d)[rows, best]


def _check_time(t):
    if t > 1.0:
        raise TimeTooLarge(f"t = {t} exceeds 1")
    if not t > 0:
        raise ValueError("t must be positive")


def discrete_action(H: TonelliHamiltonian, nodes, t: float) -> float:
    """Midpoint-rule action of the piecewise-linear path through ``nodes``."""
    nodes = np.asarray(nodes, float)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    A, _, _ = _action_terms(H, nodes[None], t / (len(nodes) - 1), hessian=False)
    return float(A[0])


def minimal_action(H: TonelliHamiltonian, x, y, t: float, N: int | None = None,
                   restarts: int = 0, seed: int = 0):
    """Least discrete action from ``x`` to ``y`` in time ``t`` and a minimizing path.

    Starts from straight lines to every lift of ``y`` within one winding;
    ``restarts`` adds randomly perturbed starts per lift.
    """
    _check_time(t)
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    d = len(x)
    N = N or default_substeps(t)
    if N < max(4, math.ceil(t / 0.05 - 1e-12)):
        raise ValueError(f"N = {N} is below the minimum for t = {t}")
    ends = x + min_lift(y - x) + _lifts(d)
    starts = np.repeat(x[None], len(ends), axis=0)
    A, Z = _minimize_paths(H, starts, ends, t, N)
    if restarts and not H.q_independent:
        rng = np.random.default_rng(seed)
        for _ in range(restarts):
            s = np.linspace(0.0, 1.0, N + 1)[None, :, None]
            Z0 = starts[:, None, :] + s * (ends - starts)[:, None, :]
            Z0[:, 1:-1] += rng.normal(scale=0.05, size=Z0[:, 1:-1].shape)
            A2, Z2 = _descend_from(H, Z0, t)
            better = A2 < A
            A[better], Z[better] = A2[better], Z2[better]
    k = int(np.argmin(A))
    return float(A[k]), ActionPath(x=x, y=ends[k], t=float(t), nodes=Z[k])


def _descend_from(H, Z0, t):
    """Local descent from given initial paths (gradient flow then Newton)."""
    N = Z0.shape[1] - 1
    tau = t / N
    Z = Z0.copy()
    for _ in range(200):
        A, grad, hess = _action_terms(H, Z, tau, hessian=True)
        dim = hess.shape[-1]
        eig_min = np.linalg.eigvalsh(hess)[:, 0]
        shift = np.maximum(0.0, -eig_min + 1e-8)
        step = -np.linalg.solve(hess + shift[:, None, None] * np.eye(dim),
                                grad.reshape(-1, dim, 1))[..., 0].reshape(grad.shape)
        lam = np.ones(len(Z))
        for _ in range(30):
            trial = Z.copy()
            trial[:, 1:-1] += lam[:, None, None] * step
            a_new, _, _ = _action_terms(H, trial, tau, hessian=False)
            bad = a_new > A
            if not np.any(bad):
                break
            lam = np.where(bad, 0.5 * lam, lam)
        Z = np.where((a_new <= A)[:, None, None], trial, Z)
        if np.max(np.abs(grad)) < 1e-11:
            break
    A, _, _ = _action_terms(H, Z, tau, hessian=False)
    return A, Z


# ---------------------------------------------------------------------------
# semigroups


def _as_evaluator(u):
    if isinstance(u, MinBranchFunction):
        return lambda q: evaluate(u, q)
    if isinstance(u, SectionSamples):
        return u.interpolant()
    return u


def _lifted_action(H, X, Y, t, N):
    """h_t along the straight-line homotopy class from X to the lifted point Y."""
    if H.q_independent:
        L, _ = lagrangian_value(H, np.zeros_like(X), (Y - X) / t)
        return t * L
    A, _ = _minimize_paths(H, X, Y, t, N)
    return A


def _pair_objective(H, fu, t, N, sign):
    """f(x, y) = u(y) - h_t(x, y) (sign = +1) or -(u(y) + h_t(y, x)) (sign = -1).

    Returns the objective over all lifts of y (with the winning lift) and
    the objective for an already lifted y.
    """

    def over_lifts(X, Y):
        if sign > 0:
            h, Yl = action_values(H, X, Y, t, N)
            return fu(Y) - h, Yl
        h, Xl = action_values(H, Y, X, t, N)
        return -(fu(Y) + h), Y + (X - Xl)

    def lifted(X, Y):
        if sign > 0:
            return fu(Y) - _lifted_action(H, X, Y, t, N)
        return -(fu(Y) + _lifted_action(H, Y, X, t, N))

    return over_lifts, lifted


def _golden_max(f, lo, hi, steps):
    """Vectorized golden-section search on boxes ``[lo, hi]`` of shape (B, k).

    Returns the best argument and value evaluated, which for a unimodal
    objective lie within ``GOLDEN**steps * (hi - lo)`` of the maximizer.
    """
    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    e = a + GOLDEN * (b - a)
    fc, fe = f(c), f(e)
    best_x = np.where((fc >= fe)[:, None], c, e)
    best_f = np.maximum(fc, fe)
    for _ in range(steps):
        left = (fc >= fe)[:, None]
        b = np.where(left, e, b)
        a = np.where(left, a, c)
        carried, f_carried = np.where(left, c, e), np.where(left[:, 0], fc, fe)
        probe = np.where(left, b - GOLDEN * (b - a), a + GOLDEN * (b - a))
        fp = f(probe)
        c, fc = np.where(left, probe, carried), np.where(left[:, 0], fp, f_carried)
        e, fe = np.where(left, carried, probe), np.where(left[:, 0], f_carried, fp)
        better = fp > best_f
        best_x = np.where(better[:, None], probe, best_x)
        best_f = np.where(better, fp, best_f)
    return best_x, best_f


def _semigroup(u, H, t, grid_n, N, sign, ascent_steps, sweeps):
    _check_time(t)
    d = H.dim
    if getattr(u, "dim", d) != d:
        raise ValueError(f"function of dimension {u.dim} with a Hamiltonian of dimension {d}")
    fu = _as_evaluator(u)
    N = N or default_substeps(t)
    X = grid_nodes(grid_n, d)
    Ygrid = X
    over_lifts, f = _pair_objective(H, fu, t, N, sign)
    best_val = np.full(len(X), -np.inf)
    best_y = np.zeros_like(X)
    chunk = max(1, 200_000 // (len(Ygrid) * 3**d))
    for start in range(0, len(X), chunk):
        xs = X[start:start + chunk]
        XX = np.repeat(xs, len(Ygrid), axis=0)
        YY = np.tile(Ygrid, (len(xs), 1))
        vals, lifted = over_lifts(XX, YY)
        vals = vals.reshape(len(xs), len(Ygrid))
        lifted = lifted.reshape(len(xs), len(Ygrid), d)
        # argmax returns the first maximizer: smallest lexicographic y on ties
        j = np.argmax(vals, axis=1)
        rows = np.arange(len(xs))
        best_val[start:start + chunk] = vals[rows, j]
        best_y[start:start + chunk] = lifted[rows, j]
    # local refinement keeps the winning lift of y, which cannot change within one cell
    h = 1.0 / grid_n
    if d == 1:
        y, val = _golden_max(lambda y: f(X, y), best_y - h, best_y + h, ascent_steps)
        best_val = np.maximum(val, best_val)
    else:
        y = best_y.copy()
        for _ in range(sweeps):
            before = best_val.copy()
            for k in range(d):
                e = np.eye(d)[k]
                s, val = _golden_max(lambda s, y=y, e=e: f(X, y + s * e),
                                     np.full((len(X), 1), -h), np.full((len(X), 1), h),
                                     ascent_steps)
                keep = val > best_val
                y = np.where(keep[:, None], y + s * e, y)
                best_val = np.where(keep, val, best_val)
            if np.max(best_val - before) <= 1e-14 * (1.0 + np.max(np.abs(best_val))):
                break
    return sign * best_val


def positive_semigroup(u, H: TonelliHamiltonian, t: float, grid_n: int, N: int | None = None, *,
                       ascent_steps: int = 60, sweeps: int = 20) -> SectionSamples:
    """Ť_t u on the grid, with covectors from central differences."""
    vals = _semigroup(u, H, t, grid_n, N, +1, ascent_steps, sweeps)
    shape = (grid_n,) * H.dim
    return derivative_of(SectionSamples(grid_n, H.dim, vals.reshape(shape), t=float(t)))


def negative_semigroup(u, H: TonelliHamiltonian, t: float, grid_n: int, N: int | None = None, *,
                       ascent_steps: int = 60, sweeps: int = 20) -> SectionSamples:
    """T_t u on the grid, with covectors from central differences."""
    vals = _semigroup(u, H, t, grid_n, N, -1, ascent_steps, sweeps)
    shape = (grid_n,) * H.dim
    return derivative_of(SectionSamples(grid_n, H.dim, vals.reshape(shape), t=float(t)))


def derivative_of(samples: SectionSamples) -> SectionSamples:
    """Fill covectors by periodic central differences with the grid spacing as step."""
    v = np.asarray(samples.values, float)
    h = samples.spacing
    comps = [(np.roll(v, -1, axis=k) - np.roll(v, 1, axis=k)) / (2 * h) for k in range(samples.dim)]
    return replace(samples, covectors=np.stack(comps, axis=-1))
