"""Finite samples of phase space T*T^d and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

GRAPH = "graph"
FIBER = "fiber"


@dataclass(frozen=True)
class PhasePointCloud:
    """Points ``(q, p)`` of T*T^d with per-point provenance.

    ``q`` holds lifted positions (shape ``(n, d)``), reduced mod Z^d only on
    export.  When ``ordered`` is set (d = 1 only) the points follow a closed
    curve of winding one in parameter order, which is how samples of an
    enlarged pseudograph are emitted: grid order, with each fiber inserted at
    its kink going from the left-limit to the right-limit covector.
    """

    q: np.ndarray
    p: np.ndarray
    provenance: np.ndarray
    source_time: float = 0.0
    ordered: bool = False

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if p.ndim == 1:
            p = p[:, None]
        if q.shape != p.shape:
            raise ValueError(f"q and p shapes differ: {q.shape} vs {p.shape}")
        prov = np.asarray(self.provenance, dtype=object)
        if prov.shape != (len(q),):
            raise ValueError("one provenance flag per point is required")
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(p)):
            raise ValueError("cloud contains non-finite coordinates")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "source_time", float(self.source_time))

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    def __len__(self) -> int:
        return len(self.q)

    @property
    def is_fiber(self) -> np.ndarray:
        return self.provenance == FIBER

    def with_points(self, q, p, source_time=None) -> "PhasePointCloud":
        return replace(self, q=q, p=p,
                       source_time=self.source_time if source_time is None else source_time)

    def select(self, mask) -> "PhasePointCloud":
        mask = np.asarray(mask)
        return replace(self, q=self.q[mask], p=self.p[mask],
                       provenance=self.provenance[mask], ordered=False)

    def to_csv(self) -> str:
        d = self.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow([f"q{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
                   + ["provenance", "source_time"])
        base = np.mod(self.q, 1.0)
        for qi, pi, prov in zip(base, self.p, self.provenance):
            w.writerow([repr(float(x)) for x in qi] + [repr(float(x)) for x in pi]
                       + [prov, repr(self.source_time)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PhasePointCloud":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        d = sum(1 for h in header if h.startswith("q"))
        if not body:
            return cls(np.zeros((0, d)), np.zeros((0, d)), np.zeros(0, dtype=object))
        arr = np.array([[float(x) for x in r[: 2 * d]] for r in body])
        prov = np.array([r[2 * d] for r in body], dtype=object)
        return cls(arr[:, :d], arr[:, d:], prov, source_time=float(body[0][2 * d + 1]))


def min_lift(dq: np.ndarray) -> np.ndarray:
    """Displacement representative with components in [-1/2, 1/2]."""
    return dq - np.round(dq)
