"""Experiment configuration: flat ``dotted.key = value`` text.

Lines starting with ``#`` are comments.  Lists are comma separated, except
lists of catalog specs such as ``cosine(a=0.1)`` which are separated by
``;``.  See ``docs/config_schema.md`` for every key and its default.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigInvalid
from .hamiltonian import CATALOG as H_CATALOG
from .semiconcave import CATALOG as U_CATALOG

_SPEC = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def _scalar(text: str):
    text = text.strip()
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_params(text: str) -> dict:
    """``"a=0.1, n=3"`` -> ``{"a": 0.1, "n": 3}``."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigInvalid(f"parameter {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _scalar(v)
    return out


def format_params(params: dict) -> str:
    return ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(params.items()))


def parse_spec(text: str):
    """``"cosine(a=0.1)"`` -> ``("cosine", {"a": 0.1})``."""
    m = _SPEC.match(text)
    if not m:
        raise ConfigInvalid(f"cannot parse catalog spec {text!r}")
    return m.group(1), parse_params(m.group(2) or "")


def format_spec(name: str, params: dict) -> str:
    return f"{name}({format_params(params)})" if params else name


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Grids:
    base_n: int = 256
    fiber_m: int = 33
    cell_n: int = 32
    section_n: int = 256
    action_N: int = 0  # 0 picks max(4, ceil(t / 0.05))


@dataclass(frozen=True)
class Tolerances:
    flow_method: str = "rk45_adaptive"
    flow_step: float = 1e-3
    flow_tolerance: float = 1e-10
    energy_drift_cap: float = 1e-8
    slope_cap: float = 50.0
    lipschitz_h_min: float = 1e-6
    lemma3_margin: float = 1e-9
    lemma4_t_max: float = 0.05
    lemma4_draws: int = 200
    hessian_density: int = 32
    compare_sup: float = 0.02
    paratingent_scales: tuple = (0.1, 0.01, 0.001)
    paratingent_growth: float = 4.0


@dataclass(frozen=True)
class Breakdown:
    functions: tuple = ()
    t_lo: float = 1e-3
    t_hi: float = 2.0
    resolution: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    hamiltonian: str = "free"
    hamiltonian_params: dict = field(default_factory=dict)
    function: str = "two_parabolas"
    function_params: dict = field(default_factory=dict)
    dim: int = 1
    times: tuple = (0.25,)
    grids: Grids = Grids()
    tolerances: Tolerances = Tolerances()
    breakdown: Breakdown = Breakdown()
    seed: int = 0
    output_dir: str = "out"

    # -- serialization ----------------------------------------------------

    def to_items(self) -> list:
        items = [
            ("hamiltonian.name", self.hamiltonian),
            ("hamiltonian.params", format_params(self.hamiltonian_params)),
            ("function.name", self.function),
            ("function.params", format_params(self.function_params)),
            ("dim", str(self.dim)),
            ("times", ", ".join(_fmt(t) for t in self.times)),
        ]
        for prefix, group in (("grids", self.grids), ("tolerances", self.tolerances),
                              ("breakdown", self.breakdown)):
            for f in fields(group):
                v = getattr(group, f.name)
                if prefix == "breakdown" and f.name == "functions":
                    text = "; ".join(v)
                elif isinstance(v, tuple):
                    text = ", ".join(_fmt(x) for x in v)
                else:
                    text = _fmt(v)
                items.append((f"{prefix}.{f.name}", text))
        items += [("seed", str(self.seed)), ("output_dir", self.output_dir)]
        return items

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_items())

    def to_dict(self) -> dict:
        return dict(self.to_items())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigInvalid(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in raw:
                raise ConfigInvalid(f"line {lineno}: duplicate key {key!r}")
            raw[key] = value
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        top = {}
        try:
            if "hamiltonian.name" in raw:
                top["hamiltonian"] = raw.pop("hamiltonian.name")
            if "hamiltonian.params" in raw:
                top["hamiltonian_params"] = parse_params(raw.pop("hamiltonian.params"))
            if "function.name" in raw:
                top["function"] = raw.pop("function.name")
            if "function.params" in raw:
                top["function_params"] = parse_params(raw.pop("function.params"))
            if "dim" in raw:
                top["dim"] = int(raw.pop("dim"))
            if "times" in raw:
                top["times"] = tuple(float(s) for s in raw.pop("times").split(",") if s.strip())
            if "seed" in raw:
                top["seed"] = int(raw.pop("seed"))
            if "output_dir" in raw:
                top["output_dir"] = raw.pop("output_dir")
            groups = {}
            for prefix, kind in (("grids", Grids), ("tolerances", Tolerances), ("breakdown", Breakdown)):
                kw = {}
                for f in fields(kind):
                    key = f"{prefix}.{f.name}"
                    if key not in raw:
                        continue
                    text = raw.pop(key)
                    default = getattr(kind(), f.name)
                    if prefix == "breakdown" and f.name == "functions":
                        kw[f.name] = tuple(s.strip() for s in text.split(";") if s.strip())
                    elif isinstance(default, tuple):
                        kw[f.name] = tuple(float(s) for s in text.split(",") if s.strip())
                    elif isinstance(default, int):
                        kw[f.name] = int(text)
                    elif isinstance(default, float):
                        kw[f.name] = float(text)
                    else:
                        kw[f.name] = text
                groups[prefix] = kind(**kw)
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from exc
        if raw:
            raise ConfigInvalid(f"unknown keys: {', '.join(sorted(raw))}")
        cfg = cls(**top, **groups)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config: {exc}") from exc
        return cls.from_text(text)

    def with_output_dir(self, path) -> "ExperimentConfig":
        return replace(self, output_dir=str(path))

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if self.hamiltonian not in H_CATALOG:
            raise ConfigInvalid(f"unknown hamiltonian {self.hamiltonian!r}")
        if self.function not in U_CATALOG:
            raise ConfigInvalid(f"unknown function {self.function!r}")
        if self.dim not in (1, 2):
            raise ConfigInvalid("dim must be 1 or 2")
        if not self.times:
            raise ConfigInvalid("at least one time is required")
        for t in self.times:
            if not (math.isfinite(t) and 0 < t <= 1):
                raise ConfigInvalid(f"times must lie in (0, 1], got {t}")
        g = self.grids
        if g.base_n < 16 or g.fiber_m < 2 or g.cell_n < 1 or g.section_n < 4:
            raise ConfigInvalid("grids below minimum (base_n >= 16, fiber_m >= 2, cell_n >= 1, section_n >= 4)")
        if g.action_N != 0 and g.action_N < 4:
            raise ConfigInvalid("grids.action_N must be 0 (automatic) or at least 4")
        if g.action_N and any(g.action_N < math.ceil(t / 0.05 - 1e-12) for t in self.times):
            raise ConfigInvalid("grids.action_N below ceil(t / 0.05) for some time")
        tol = self.tolerances
        if tol.flow_method not in ("rk4_fixed", "rk45_adaptive"):
            raise ConfigInvalid(f"unknown flow method {tol.flow_method!r}")
        positive = ("flow_step", "flow_tolerance", "energy_drift_cap", "slope_cap", "lipschitz_h_min",
                    "lemma4_t_max", "compare_sup", "paratingent_growth")
        for name in positive:
            if not getattr(tol, name) > 0:
                raise ConfigInvalid(f"tolerances.{name} must be positive")
        if tol.lemma3_margin < 0 or tol.lemma4_draws < 0 or tol.hessian_density < 8:
            raise ConfigInvalid("tolerances.lemma3_margin, lemma4_draws >= 0 and hessian_density >= 8")
        if not tol.paratingent_scales or any(h <= 0 for h in tol.paratingent_scales):
            raise ConfigInvalid("tolerances.paratingent_scales must be positive")
        b = self.breakdown
        if not 0 < b.t_lo < b.t_hi or b.resolution <= 0:
            raise ConfigInvalid("breakdown needs 0 < t_lo < t_hi and resolution > 0")
        for spec in b.functions:
            name, _ = parse_spec(spec)
            if name not in U_CATALOG:
                raise ConfigInvalid(f"unknown function {name!r} in breakdown.functions")

