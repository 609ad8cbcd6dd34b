"""Quantitative checks of the graph, Lipschitz and exactness properties of
flowed enlarged pseudographs, and of the two inequalities they rest on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.interpolate import griddata

from .cloud import PhasePointCloud, min_lift
from .errors import GridMismatch, NoBreakdownInRange, NotAGraph
from .flow import FlowConfig, PhaseLoop, flow_cloud, flow_points, loop_action
from .hamiltonian import CompactTube, TonelliHamiltonian, hessian_bounds
from .laxoleinik import SectionSamples, grid_nodes
from .semiconcave import MinBranchFunction, enlarged_pseudograph_sample

DEFAULT_SLOPE_CAP = 50.0
DEFAULT_CELLS = 32


# ---------------------------------------------------------------------------
# report


@dataclass
class CheckRecord:
    name: str
    passed: bool
    margin: float
    details: dict = field(default_factory=dict)
    control: bool = False


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


@dataclass
class VerificationReport:
    config: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    timestamps: dict = field(default_factory=dict)

    def add(self, name, passed, margin, details=None, control=False) -> CheckRecord:
        if any(c.name == name for c in self.checks):
            raise ValueError(f"check {name!r} recorded twice")
        rec = CheckRecord(name, bool(passed), float(margin), dict(details or {}), bool(control))
        self.checks.append(rec)
        return rec

    def __getitem__(self, name) -> CheckRecord:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks if not c.control)

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed and not c.control]

    def to_dict(self, include_timestamps: bool = True) -> dict:
        out = {
            "config": self.config,
            "checks": [
                {"name": c.name, "pass": c.passed, "margin": c.margin,
                 "details": c.details, "control": c.control}
                for c in self.checks
            ],
            "passed": self.passed,
        }
        if include_timestamps:
            out["timestamps"] = self.timestamps
        return _jsonable(out)

    def to_json(self, include_timestamps: bool = True) -> str:
        return json.dumps(self.to_dict(include_timestamps), sort_keys=True, indent=2) + "\n"

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            if c.control:
                tag = "CONTROL OK" if c.details.get("as_designed", True) else "CONTROL UNEXPECTED"
            else:
                tag = "PASS" if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}: margin={c.margin:.6g}")
        lines.append("ALL NON-CONTROL CHECKS PASSED" if self.passed
                     else f"FAILED: {', '.join(self.failures())}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# inequalities


def _pair_blocks(n, block=2048):
    for start in range(0, n, block):
        yield slice(start, min(n, start + block))


def lemma3_check(cloud: PhasePointCloud, K: float, tol: float = 1e-9):
    """Monotonicity bound (p1 - p0).(q1 - q0) <= 2K |q1 - q0|^2 over all close pairs.

    Returns ``(passed, worst_margin)`` with the margin
    max [(dp . dq) - 2K |dq|^2] over pairs at torus distance below 1/2.
    """
    if cloud.source_time != 0.0:
        raise ValueError("lemma3_check expects an unflowed sample (source_time 0)")
    worst = -math.inf
    for blk in _pair_blocks(len(cloud)):
        dq = min_lift(cloud.q[None, :, :] - cloud.q[blk, None, :])
        dp = cloud.p[None, :, :] - cloud.p[blk, None, :]
        sq = np.sum(dq * dq, axis=-1)
        margin = np.sum(dp * dq, axis=-1) - 2.0 * K * sq
        close = np.sqrt(sq) < 0.5
        if np.any(close):
            worst = max(worst, float(margin[close].max()))
    if worst == -math.inf:
        worst = 0.0
    return worst <= tol, worst


class Lemma4Result(NamedTuple):
    passed: bool
    lhs: float
    bounds: dict


def lemma4_batch(H: TonelliHamiltonian, q, p, dp, t, c: float, C: float,
                 cfg: FlowConfig | None = None, tol: float = 1e-12):
    """Vectorized form of :func:`lemma4_check` for arrays of draws (t per draw)."""
    q, p, dp = (np.asarray(a, float).reshape(-1, H.dim) for a in (q, p, dp))
    t = np.broadcast_to(np.asarray(t, float), (len(q),))
    q0 = np.empty_like(q)
    p0 = np.empty_like(p)
    q1 = np.empty_like(q)
    p1 = np.empty_like(p)
    for tv in np.unique(t):
        sel = t == tv
        q0[sel], p0[sel] = flow_points(H, q[sel], p[sel], float(tv), cfg)
        q1[sel], p1[sel] = flow_points(H, q[sel], p[sel] + dp[sel], float(tv), cfg)
    dq = q1 - q0
    lhs = np.sum((p1 - p0) * dq, axis=-1)
    size = np.linalg.norm(dp, axis=-1)
    lower = 0.5 * c * t * size**2
    upper = 2.0 * C * t * size
    dq_norm = np.linalg.norm(dq, axis=-1)
    lower_margin = lhs - lower
    upper_margin = upper - dq_norm
    passed = (lower_margin >= -tol * (1 + np.abs(lower))) & (upper_margin >= -tol * (1 + upper))
    return passed, lhs, lower_margin, upper_margin, dq_norm


def lemma4_check(H: TonelliHamiltonian, q, p, dp, t: float, c: float, C: float,
                 cfg: FlowConfig | None = None, t_max: float = 0.05) -> Lemma4Result:
    """Flow (q, p) and (q, p + dp) for time t and test

        (p1 - p0).(q1 - q0) >= (c / 2) t |dp|^2   and   |q1 - q0| <= 2 C t |dp|.
    """
    if not 0 < t <= t_max:
        raise ValueError(f"t must lie in (0, {t_max}]")
    passed, lhs, lo_m, up_m, dq_norm = lemma4_batch(H, q, p, dp, t, c, C, cfg)
    size = float(np.linalg.norm(np.atleast_1d(dp)))
    bounds = {
        "lower": 0.5 * c * t * size**2,
        "upper": 2.0 * C * t * size,
        "dq_norm": float(dq_norm[0]),
        "lower_margin": float(lo_m[0]),
        "upper_margin": float(up_m[0]),
    }
    return Lemma4Result(bool(passed[0]), float(lhs[0]), bounds)


def random_lemma4_draws(dim: int, radius: float, n: int, t_max: float, rng: np.random.Generator):
    """Draws (q, p, dp, t) with p and p + dp in the momentum ball and t in (0, t_max]."""

    def ball(k):
        v = rng.normal(size=(k, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * radius * rng.uniform(size=(k, 1)) ** (1.0 / dim)

    q = rng.uniform(size=(n, dim))
    p = ball(n)
    dp = ball(n) - p
    t = t_max * (1.0 - rng.uniform(size=n))
    return q, p, dp, t


# ---------------------------------------------------------------------------
# graph, surjectivity, Lipschitz


class GraphTest(NamedTuple):
    is_graph: bool
    offending_cells: list


def _cell_index(q, cell_n):
    cells = np.floor(np.mod(q, 1.0) * cell_n).astype(int) % cell_n
    if cells.shape[1] == 1:
        return cells[:, 0]
    return cells[:, 0] * cell_n + cells[:, 1]


def graph_test(cloud: PhasePointCloud, cell_n: int = DEFAULT_CELLS,
               slope_cap: float = DEFAULT_SLOPE_CAP, tol: float = 1e-12,
               p_tol: float = 1e-9) -> GraphTest:
    """Is the cloud a graph over the base?

    An ordered one-dimensional cloud is a graph exactly when its base
    coordinate advances strictly along the curve; a cell offends where it
    stalls while the covector moves, or runs backwards (a fold).  Other
    clouds offend in a cell holding two points whose covectors differ by
    more than ``slope_cap`` times their base distance.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    cells = _cell_index(cloud.q, cell_n)
    if cloud.ordered and cloud.dim == 1:
        x = cloud.q[:, 0]
        p = cloud.p[:, 0]
        dx = np.diff(np.append(x, x[0] + 1.0))
        dp = np.diff(np.append(p, p[0]))
        bad = (dx < -tol) | ((dx <= tol) & (np.abs(dp) > p_tol))
        offending = sorted({int(c) for c in cells[bad]})
        return GraphTest(not offending, offending)
    offending = []
    order = np.argsort(cells, kind="stable")
    bounds = np.flatnonzero(np.diff(cells[order])) + 1
    for group in np.split(order, bounds):
        if len(group) < 2:
            continue
        dq = min_lift(cloud.q[group][None] - cloud.q[group][:, None])
        dp = cloud.p[group][None] - cloud.p[group][:, None]
        dist = np.linalg.norm(dq, axis=-1)
        jump = np.linalg.norm(dp, axis=-1)
        if np.any(jump > slope_cap * dist + p_tol):
            offending.append(int(cells[group[0]]))
    return GraphTest(not offending, sorted(offending))


def surjectivity_test(cloud: PhasePointCloud, cell_n: int = DEFAULT_CELLS) -> float:
    """Fraction of base cells containing at least one projected point."""
    if len(cloud) == 0:
        return 0.0
    cells = _cell_index(cloud.q, cell_n)
    return len(np.unique(cells)) / float(cell_n ** cloud.dim)


def _points_of(obj):
    if isinstance(obj, SectionSamples):
        return obj.nodes(), obj.flat_covectors()
    return obj.q, obj.p


def _require_graph(obj, cell_n, slope_cap):
    if isinstance(obj, PhasePointCloud):
        res = graph_test(obj, cell_n, slope_cap)
        if not res.is_graph:
            raise NotAGraph(f"cloud is not a graph (offending cells {res.offending_cells[:8]})")


def _max_ratio(q, p, lo, hi, with_location=False):
    best, where = 0.0, None
    found = False
    for blk in _pair_blocks(len(q)):
        dq = min_lift(q[None] - q[blk, None])
        dist = np.linalg.norm(dq, axis=-1)
        jump = np.linalg.norm(p[None] - p[blk, None], axis=-1)
        sel = (dist >= lo) & (dist <= hi)
        if np.any(sel):
            found = True
            ratio = np.where(sel, jump / np.where(sel, dist, 1.0), -1.0)
            k = np.unravel_index(np.argmax(ratio), ratio.shape)
            if ratio[k] > best:
                best = float(ratio[k])
                where = np.mod(q[blk][k[0]], 1.0)
    if with_location:
        return (best if found else None), where
    return best if found else None


def lipschitz_estimate(obj, h_min: float = 1e-6, cell_n: int = DEFAULT_CELLS,
                       slope_cap: float = DEFAULT_SLOPE_CAP) -> float:
    """max |dp| / |dq| over pairs at base distance at least ``h_min`` (minimal lifts)."""
    _require_graph(obj, cell_n, slope_cap)
    q, p = _points_of(obj)
    val = _max_ratio(q, p, h_min, math.inf)
    return 0.0 if val is None else val


@dataclass(frozen=True)
class ParatingentResult:
    max_slope_by_scale: dict
    vertical: bool
    location: np.ndarray | None


def paratingent_vertical_test(cloud, h_scales=(1e-1, 1e-2, 1e-3), growth: float = 4.0) -> ParatingentResult:
    """Secant slopes |dp| / |dq| at shrinking base scales h (pairs with h/2 <= |dq| <= h).

    A vertical direction in the paratingent cone shows up as slopes that
    keep growing as h shrinks; it is flagged when the slope grows by more
    than ``growth`` between consecutive non-empty scales.
    """
    q, p = _points_of(cloud)
    slopes, locations = {}, {}
    for h in sorted(h_scales, reverse=True):
        val, where = _max_ratio(q, p, 0.5 * h, h, with_location=True)
        slopes[float(h)] = val
        locations[float(h)] = where
    seen = [(h, s) for h, s in slopes.items() if s is not None]
    vertical = False
    location = None
    for (h0, s0), (h1, s1) in zip(seen, seen[1:]):
        if s1 > growth * max(s0, 1e-300) and s1 > 0:
            vertical = True
            location = locations[h1]
    return ParatingentResult(slopes, vertical, location)


# ---------------------------------------------------------------------------
# exactness and comparison with the semigroup


def cloud_to_section(cloud: PhasePointCloud, grid_n: int, t: float | None = None) -> SectionSamples:
    """Covectors of a graph cloud interpolated (linearly, periodically) at the grid nodes."""
    d = cloud.dim
    nodes = grid_nodes(grid_n, d)
    base = np.mod(cloud.q, 1.0)
    if d == 1:
        order = np.argsort(base[:, 0], kind="stable")
        xs, ps = base[order, 0], cloud.p[order, 0]
        keep = np.append(np.diff(xs) > 0, True)
        cov = np.interp(nodes[:, 0], xs[keep], ps[keep], period=1.0)[:, None]
    else:
        shifts = np.array([(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)], float)
        pts = (base[None] + shifts[:, None]).reshape(-1, 2)
        near = np.all((pts > -0.25) & (pts < 1.25), axis=1)
        vals = np.tile(cloud.p, (len(shifts), 1))
        cov = np.stack([griddata(pts[near], vals[near, k], nodes, method="linear")
                        for k in range(2)], axis=-1)
        holes = ~np.all(np.isfinite(cov), axis=1)
        if np.any(holes):
            cov[holes] = np.stack([griddata(pts[near], vals[near, k], nodes[holes], method="nearest")
                                   for k in range(2)], axis=-1)
    shape = (grid_n,) * d
    t = -cloud.source_time if t is None else t
    return SectionSamples(grid_n, d, np.zeros(shape), t=t, covectors=cov.reshape(shape + (d,)))


def exactness_test(obj, cell_n: int = DEFAULT_CELLS, slope_cap: float = DEFAULT_SLOPE_CAP,
                   grid_n: int = 256) -> np.ndarray:
    """Integrals of the section along the d fundamental loops of the torus.

    For a section on a grid the trapezoidal sum along every grid line in
    direction k is taken and the one of largest magnitude reported.  An
    ordered one-dimensional cloud is integrated as the closed curve it is.
    """
    _require_graph(obj, cell_n, slope_cap)
    if isinstance(obj, PhasePointCloud):
        if obj.ordered and obj.dim == 1:
            return np.array([loop_action(PhaseLoop(obj.q, obj.p, (1,)))])
        obj = cloud_to_section(obj, grid_n)
    cov = np.asarray(obj.covectors, float)
    h = obj.spacing
    if obj.dim == 1:
        return np.array([float(np.sum(cov[:, 0]) * h)])
    out = []
    for k in range(obj.dim):
        lines = np.sum(cov[..., k], axis=k) * h
        out.append(float(lines[np.argmax(np.abs(lines))]))
    return np.array(out)


def is_exact(integrals, grid_n: int) -> bool:
    return bool(np.all(np.abs(integrals) <= 5.0 / grid_n))


def compare_with_semigroup(flowed_cloud: PhasePointCloud, semigroup_section: SectionSamples,
                           cell_n: int = DEFAULT_CELLS, slope_cap: float = DEFAULT_SLOPE_CAP) -> float:
    """Sup distance between the semigroup covectors and the flowed cloud read as a section."""
    if flowed_cloud.dim != semigroup_section.dim:
        raise GridMismatch("dimensions differ")
    if abs(flowed_cloud.source_time + semigroup_section.t) > 1e-9:
        raise GridMismatch(f"cloud at time {flowed_cloud.source_time} does not match "
                           f"semigroup time {semigroup_section.t}")
    if semigroup_section.covectors is None:
        raise GridMismatch("semigroup section has no covectors")
    _require_graph(flowed_cloud, cell_n, slope_cap)
    interp = cloud_to_section(flowed_cloud, semigroup_section.grid_n, semigroup_section.t)
    diff = interp.flat_covectors() - semigroup_section.flat_covectors()
    return float(np.max(np.linalg.norm(diff, axis=-1)))


# ---------------------------------------------------------------------------
# breakdown


@dataclass(frozen=True)
class BreakdownResult:
    t_star_measured: float
    epsilon_paper: float
    epsilon_derived: float
    c: float
    C: float
    K: float
    bracket: tuple = (math.nan, math.nan)
    breakdown_found: bool = True

    @property
    def bound_ok(self) -> bool:
        """The measured time is not below the smaller guaranteed epsilon (when K > 0)."""
        if self.K <= 0:
            return True
        return self.t_star_measured >= min(self.epsilon_paper, self.epsilon_derived) - 1e-3


def epsilon_bound(K: float, c: float, C: float):
    """(K c / (4 C^2), c / (16 K C^2)); the second is infinite for K = 0."""
    stated = K * c / (4.0 * C * C)
    derived = c / (16.0 * K * C * C) if K > 0 else math.inf
    return stated, derived


def breakdown_time(H: TonelliHamiltonian, u: MinBranchFunction, t_lo: float = 1e-3,
                   t_hi: float = 2.0, cell_n: int = DEFAULT_CELLS, cfg: FlowConfig | None = None, *,
                   base_n: int = 256, fiber_m: int = 33, resolution: float = 1e-3,
                   slope_cap: float = DEFAULT_SLOPE_CAP, sample_density: int = 32) -> BreakdownResult:
    """Largest t for which phi_{-t} of the sampled enlarged pseudograph is still a graph.

    Bisection on t; a time counts as broken only when the graph test fails
    on both the base grid and its 2x refinement.  The bracket is narrowed
    to ``resolution / 8`` and its midpoint reported, so the bisection
    itself contributes well under ``resolution`` to the error.
    """
    if not t_lo < t_hi:
        raise ValueError("t_lo must be below t_hi")
    coarse = enlarged_pseudograph_sample(u, base_n, fiber_m)
    fine = enlarged_pseudograph_sample(u, 2 * base_n, fiber_m)
    radius = max(float(np.max(np.linalg.norm(coarse.p, axis=1))), 1e-3)
    c, C = hessian_bounds(H, CompactTube(radius), cfg, sample_density)
    K = u.K
    eps_paper, eps_derived = epsilon_bound(K, c, C)

    def broken(t):
        return (not graph_test(flow_cloud(H, coarse, -t, cfg), cell_n, slope_cap).is_graph
                and not graph_test(flow_cloud(H, fine, -t, cfg), cell_n, slope_cap).is_graph)

    if not broken(t_hi):
        res = BreakdownResult(t_hi, eps_paper, eps_derived, c, C, K, (t_hi, math.inf), False)
        raise NoBreakdownInRange(f"still a graph at t = {t_hi}", res)
    if broken(t_lo):
        return BreakdownResult(0.0, eps_paper, eps_derived, c, C, K, (0.0, t_lo), True)
    lo, hi = t_lo, t_hi
    while hi - lo > resolution / 8:
        mid = 0.5 * (lo + hi)
        if broken(mid):
            hi = mid
        else:
            lo = mid
    return BreakdownResult(0.5 * (lo + hi), eps_paper, eps_derived, c, C, K, (lo, hi), True)
