"""Semi-concave functions on T^d as finite minima of C^2 branches.

A branch is either a 1-periodic C^2 function, or a C^2 function ``f`` on
R^d placed at a ``center`` and periodized over the lattice, contributing the
candidates ``q -> f(q - center - k)`` for k in Z^d near ``q - center``.  The
function u is the minimum over all candidates; its superdifferential at q
is the convex hull of the gradients of the candidates that are active there.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .cloud import FIBER, GRAPH, PhasePointCloud, min_lift
from .errors import ConfigInvalid, GridTooCoarse

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Branch:
    value: Callable
    grad: Callable
    hess: Callable
    center: tuple | None = None
    label: str = ""

    @property
    def periodized(self) -> bool:
        return self.center is not None


@dataclass(frozen=True)
class MinBranchFunction:
    branches: tuple
    dim: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # None selects the relative rule 1e-9 * (1 + |u(q)|)
    activity_tolerance: float | None = None

    def __post_init__(self):
        if not self.branches:
            raise ValueError("at least one branch is required")
        object.__setattr__(self, "branches", tuple(self.branches))

    def __call__(self, q):
        return evaluate(self, q)

    @cached_property
    def K(self) -> float:
        return semiconcavity_constant(self)

    def tau(self, values: np.ndarray) -> np.ndarray:
        if self.activity_tolerance is not None:
            return np.full(np.shape(values), float(self.activity_tolerance))
        return 1e-9 * (1.0 + np.abs(values))

    def label(self) -> str:
        if not self.params:
            return self.name
        args = ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.name}({args})"


@dataclass(frozen=True)
class SuperdifferentialSet:
    """Convex hull of ``vertices`` (covectors) over the base point ``base``."""

    base: np.ndarray
    vertices: np.ndarray

    @property
    def is_singleton(self) -> bool:
        return len(self.vertices) == 1

    def contains(self, p, tol: float = 1e-9) -> bool:
        p = np.atleast_1d(np.asarray(p, float))
        v = self.vertices
        if len(v) == 1:
            return bool(np.max(np.abs(v[0] - p)) <= tol)
        if v.shape[1] == 1:
            return bool(v.min() - tol <= p[0] <= v.max() + tol)
        # feasibility of a convex combination, by least squares on the simplex
        from scipy.optimize import nnls

        A = np.vstack([v.T, np.ones(len(v)) * 1e3])
        b = np.concatenate([p, [1e3]])
        _, resid = nnls(A, b)
        return bool(resid <= tol * 10)


# ---------------------------------------------------------------------------
# candidate enumeration


def _as_points(u: MinBranchFunction, q) -> tuple[np.ndarray, bool]:
    q = np.asarray(q, dtype=float)
    single = q.ndim == 0 if u.dim == 1 else q.ndim == 1
    return q.reshape(-1, u.dim), single


def _shifts(d: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=d)), dtype=float)


def _candidates(u: MinBranchFunction, q: np.ndarray):
    """Values (n, c), gradients (n, c, d) and ids (n, c, 1 + d) of all candidates."""
    n, d = q.shape
    vals, grads, ids = [], [], []
    for b_idx, br in enumerate(u.branches):
        if not br.periodized:
            vals.append(br.value(q)[:, None])
            grads.append(br.grad(q)[:, None, :])
            ids.append(np.concatenate([np.full((n, 1, 1), b_idx), np.zeros((n, 1, d))], axis=-1))
            continue
        c = np.asarray(br.center, float)
        base = np.floor(q - c)
        k = base[:, None, :] + _shifts(d)[None, :, :]
        y = q[:, None, :] - c - k
        vals.append(br.value(y))
        grads.append(br.grad(y))
        ids.append(np.concatenate([np.full(k.shape[:2] + (1,), b_idx), k], axis=-1))
    return (np.concatenate(vals, axis=1), np.concatenate(grads, axis=1),
            np.concatenate(ids, axis=1).astype(np.int64))


def _candidate_value(u: MinBranchFunction, cid, s: np.ndarray):
    """Value and gradient of one candidate (branch, shift) at points ``s`` (n, d)."""
    br = u.branches[int(cid[0])]
    if not br.periodized:
        return br.value(s), br.grad(s)
    y = s - np.asarray(br.center, float) - np.asarray(cid[1:], float)
    return br.value(y), br.grad(y)


def evaluate(u: MinBranchFunction, q):
    """u(q) = minimum over all branch candidates."""
    pts, single = _as_points(u, q)
    vals = _candidates(u, pts)[0].min(axis=1)
    return float(vals[0]) if single else vals


def _active_mask(u, vals):
    vmin = vals.min(axis=1, keepdims=True)
    return vals <= vmin + u.tau(vmin)


def _unique_rows(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    out = []
    for row in a:
        if not any(np.max(np.abs(row - r)) <= tol for r in out):
            out.append(row)
    return np.array(out)


def superdifferential(u: MinBranchFunction, q) -> SuperdifferentialSet:
    """Gradients of the active candidates at ``q``; in d = 1 sorted from left-limit to right-limit."""
    pts, _ = _as_points(u, q)
    vals, grads, _ = _candidates(u, pts[:1])
    active = _active_mask(u, vals)[0]
    verts = _unique_rows(grads[0, active])
    if u.dim == 1:
        verts = verts[np.argsort(-verts[:, 0], kind="stable")]
    return SuperdifferentialSet(base=pts[0].copy(), vertices=verts)


def semiconcavity_constant(u: MinBranchFunction, sample_density: int = 64) -> float:
    """Half the largest sampled Hessian eigenvalue over all branches, clamped at 0."""
    d = u.dim
    top = -math.inf
    for br in u.branches:
        if br.periodized:
            axis = np.arange(-sample_density, sample_density) / sample_density
        else:
            axis = np.arange(sample_density) / sample_density
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
        top = max(top, float(np.linalg.eigvalsh(br.hess(grid)).max()))
    return max(0.0, 0.5 * top)


def definition_margin(u: MinBranchFunction, x, p, K: float, ys) -> float:
    """max over y of u(y) - u(x) - p.(y - x) - K |y - x|^2 with minimal-lift y - x.

    Non-positive exactly when ``p`` passes the K-superdifferential inequality
    on the sample ``ys``.
    """
    x = np.atleast_1d(np.asarray(x, float))
    p = np.atleast_1d(np.asarray(p, float))
    ys = np.asarray(ys, float).reshape(-1, u.dim)
    delta = min_lift(ys - x)
    rhs = evaluate(u, x[None])[0] + delta @ p + K * np.sum(delta * delta, axis=1)
    return float(np.max(evaluate(u, ys) - rhs))


# ---------------------------------------------------------------------------
# sampling the enlarged pseudograph


def _hull_samples(verts: np.ndarray, m: int) -> np.ndarray:
    """Points on the convex hull of ``verts``: edges first, then an interior lattice."""
    if len(verts) == 1:
        return verts.copy()
    d = verts.shape[1]
    if d == 1:
        hi, lo = verts[:, 0].max(), verts[:, 0].min()
        return np.linspace(hi, lo, m)[:, None]
    try:
        hull = ConvexHull(verts)
        ring = verts[hull.vertices]
    except (QhullError, ValueError):
        # collinear: the hull is the segment between the extreme points
        direction = verts[-1] - verts[0]
        proj = verts @ direction
        ring = np.array([verts[np.argmin(proj)], verts[np.argmax(proj)]])
    s = np.linspace(0.0, 1.0, m)[:-1, None]
    pts = []
    count = len(ring) if len(ring) > 2 else 1
    for i in range(count):
        a, b = ring[i], ring[(i + 1) % len(ring)]
        pts.append(a + s * (b - a))
    if len(ring) == 2:
        pts.append(ring[1:2])
    if len(ring) > 2 and m > 2:
        steps = m - 1
        for i in range(1, len(ring) - 1):
            a, b, c = ring[0], ring[i], ring[i + 1]
            for j in range(1, steps):
                for k in range(1, steps - j):
                    w = np.array([steps - j - k, j, k]) / steps
                    pts.append((w[0] * a + w[1] * b + w[2] * c)[None])
    return _unique_rows(np.vstack(pts))


def _edge_ids(u, vals, grads, ids, direction):
    """Ids of the candidates active just after (``first``) and just before (``last``) each point along ``direction``."""
    active = _active_mask(u, vals)
    slope = grads @ direction
    big = np.where(active, slope, np.inf)
    small = np.where(active, slope, -np.inf)
    after = np.argmin(big, axis=1)
    before = np.argmax(small, axis=1)
    rows = np.arange(len(vals))
    return ids[rows, after], ids[rows, before], active


def _locate_kink(u, a, b, ca, cb, tol=1e-12):
    """Bisection for the crossing of two candidates on the segment [a, b]."""
    lo, hi = 0.0, 1.0
    direction = b - a

    def gap(s):
        pt = (a + s * direction)[None]
        return _candidate_value(u, ca, pt)[0][0] - _candidate_value(u, cb, pt)[0][0]

    g_lo = gap(lo)
    length = float(np.max(np.abs(direction)))
    while (hi - lo) * length > tol:
        mid = 0.5 * (lo + hi)
        g_mid = gap(mid)
        if (g_mid <= 0) == (g_lo <= 0):
            lo, g_lo = mid, g_mid
        else:
            hi = mid
    return a + 0.5 * (lo + hi) * direction


def _kinks_on_edges(u, starts, ends, direction, split_depth=0):
    """Kink base points strictly inside grid edges ``starts[i] -> ends[i]``.

    With ``split_depth == 0`` an edge holding more than one kink raises
    GridTooCoarse.  Otherwise such edges are halved recursively, at most
    ``split_depth`` times, which is needed in d = 2 where edges passing next
    to a triple junction always cross two kink lines.
    """
    va, ga, ia = _candidates(u, starts)
    vb, gb, ib = _candidates(u, ends)
    id_after_a, _, _ = _edge_ids(u, va, ga, ia, direction)
    _, id_before_b, _ = _edge_ids(u, vb, gb, ib, direction)
    kinks = []
    for e in range(len(starts)):
        for s in _segment_kinks(u, starts[e], ends[e], id_after_a[e], id_before_b[e],
                                direction, split_depth):
            kinks.append((e, s))
    return kinks


def _segment_kinks(u, a, b, ca, cb, direction, depth):
    mid = 0.5 * (a + b)
    vm, gm, im = _candidates(u, mid[None])
    active_mid = im[0][_active_mask(u, vm)[0]]
    has_a = np.any(np.all(active_mid == ca, axis=1))
    has_b = np.any(np.all(active_mid == cb, axis=1))
    single = has_a or has_b
    if single and np.array_equal(ca, cb):
        return []
    if single:
        s = _locate_kink(u, a, b, ca, cb)
        vs = _candidates(u, s[None])[0][0]
        own = _candidate_value(u, ca, s[None])[0][0]
        if vs.min() >= own - 1e-9 * (1 + abs(own)):
            return [s]
        if depth <= 0:
            raise GridTooCoarse(f"a third branch undercuts the kink near {s}; refine the base grid")
    elif depth <= 0:
        raise GridTooCoarse(f"more than one kink between {a} and {b}; refine the base grid")
    after_m, before_m, _ = _edge_ids(u, vm, gm, im, direction)
    left = _segment_kinks(u, a, mid, ca, before_m[0], direction, depth - 1)
    right = _segment_kinks(u, mid, b, after_m[0], cb, direction, depth - 1)
    # a kink sitting exactly on the midpoint is found from both halves
    if not np.array_equal(before_m[0], after_m[0]):
        left.append(mid.copy())
    return left + right


def enlarged_pseudograph_sample(u: MinBranchFunction, base_grid_n: int,
                                fiber_res_m: int) -> PhasePointCloud:
    """Finite sample of the set of all superdifferentials of ``u``.

    One graph point per grid base, ``fiber_res_m`` hull points over every
    base where the superdifferential is not a singleton, and kinks lying
    between grid nodes located by bisection and sampled the same way.
    """
    if base_grid_n < 16:
        raise ValueError("base_grid_n must be at least 16")
    if fiber_res_m < 2:
        raise ValueError("fiber_res_m must be at least 2")
    n, m, d = int(base_grid_n), int(fiber_res_m), u.dim
    if d == 1:
        return _sample_1d(u, n, m)
    return _sample_2d(u, n, m)


def _sample_1d(u, n, m):
    nodes = np.arange(n + 1, dtype=float)[:, None] / n
    vals, grads, ids = _candidates(u, nodes[:n])
    active = _active_mask(u, vals)
    kinks = dict(_kinks_on_edges(u, nodes[:n], nodes[1:], np.array([1.0])))
    qs, ps, prov = [], [], []
    for i in range(n):
        g = grads[i, active[i], 0]
        left = g.max()
        qs.append(nodes[i, 0])
        ps.append(left)
        prov.append(GRAPH)
        if g.max() - g.min() > 1e-12:
            for p in np.linspace(g.max(), g.min(), m):
                qs.append(nodes[i, 0])
                ps.append(p)
                prov.append(FIBER)
        if i in kinks:
            s = kinks[i]
            verts = superdifferential(u, s).vertices[:, 0]
            for p in np.linspace(verts.max(), verts.min(), m):
                qs.append(s[0])
                ps.append(p)
                prov.append(FIBER)
    return PhasePointCloud(np.array(qs)[:, None], np.array(ps)[:, None], np.array(prov, dtype=object),
                           source_time=0.0, ordered=True)


def _sample_2d(u, n, m):
    axis = np.arange(n + 1, dtype=float) / n
    Q1, Q2 = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([Q1, Q2], axis=-1)
    nodes = grid[:n, :n].reshape(-1, 2)
    vals, grads, ids = _candidates(u, nodes)
    active = _active_mask(u, vals)
    qs, ps, prov = [], [], []

    def emit_fiber(base, verts):
        for p in _hull_samples(verts, m):
            qs.append(base)
            ps.append(p)
            prov.append(FIBER)

    for k, base in enumerate(nodes):
        first = int(np.flatnonzero(active[k])[0])
        qs.append(base)
        ps.append(grads[k, first])
        prov.append(GRAPH)
        verts = _unique_rows(grads[k, active[k]])
        if len(verts) > 1:
            emit_fiber(base, verts)
    for axis_idx in (0, 1):
        direction = np.eye(2)[axis_idx]
        starts = nodes
        ends = nodes + direction / n
        for _, s in _kinks_on_edges(u, starts, ends, direction, split_depth=20):
            emit_fiber(s, superdifferential(u, s).vertices)
    return PhasePointCloud(np.array(qs), np.array(ps), np.array(prov, dtype=object),
                           source_time=0.0, ordered=False)


# ---------------------------------------------------------------------------
# catalog


def _sum_cos(a):
    def value(q):
        return a * np.sum(np.cos(TWO_PI * q), axis=-1)

    def grad(q):
        return -a * TWO_PI * np.sin(TWO_PI * q)

    def hess(q):
        diag = -a * TWO_PI**2 * np.cos(TWO_PI * q)
        out = np.zeros(diag.shape + (diag.shape[-1],))
        idx = np.arange(diag.shape[-1])
        out[..., idx, idx] = diag
        return out

    return value, grad, hess


def _quadratic(alpha, offset=0.0):
    def value(y):
        return 0.5 * alpha * np.sum(y * y, axis=-1) + offset

    def grad(y):
        return alpha * y

    def hess(y):
        d = y.shape[-1]
        return np.broadcast_to(alpha * np.eye(d), y.shape[:-1] + (d, d))

    return value, grad, hess


def zero(dim: int = 1) -> MinBranchFunction:
    return MinBranchFunction((Branch(*_sum_cos(0.0), label="zero"),), dim, "zero", {})


def cosine(dim: int = 1, a: float = 0.2) -> MinBranchFunction:
    """Smooth u = a * sum_j cos(2 pi q_j)."""
    return MinBranchFunction((Branch(*_sum_cos(float(a)), label="cos"),), dim, "cosine", {"a": float(a)})


def two_parabolas(dim: int = 1) -> MinBranchFunction:
    """u = |q|^2 / 2 periodized, i.e. min(q^2/2, (q - 1)^2/2) on [0, 1) in d = 1."""
    br = Branch(*_quadratic(1.0), center=(0.0,) * dim, label="parabola")
    return MinBranchFunction((br,), dim, "two_parabolas", {})


def random_quadratics(dim: int = 1, n: int = 3, seed: int = 0) -> MinBranchFunction:
    rng = np.random.default_rng(int(seed))
    branches = []
    for i in range(int(n)):
        center = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=dim))
        alpha = float(rng.uniform(0.5, 2.0))
        offset = float(rng.uniform(0.0, 0.2))
        branches.append(Branch(*_quadratic(alpha, offset), center=center, label=f"quad{i}"))
    return MinBranchFunction(tuple(branches), dim, "random_quadratics", {"n": int(n), "seed": int(seed)})


CATALOG = {
    "zero": zero,
    "two_parabolas": two_parabolas,
    "cosine": cosine,
    "random_quadratics": random_quadratics,
}


def make_function(name: str, dim: int = 1, **params) -> MinBranchFunction:
    try:
        factory = CATALOG[name]
    except KeyError:
        raise ConfigInvalid(f"unknown function {name!r}; known: {sorted(CATALOG)}") from None
    if dim not in (1, 2):
        raise ConfigInvalid("only d = 1 and d = 2 are supported")
    try:
        return factory(dim, **params)
    except TypeError as exc:
        raise ConfigInvalid(f"bad parameters for {name!r}: {exc}") from None
