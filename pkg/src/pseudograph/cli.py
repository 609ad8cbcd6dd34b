"""Command line runner: ``run <config>``, ``breakdown <config>``, ``export <run_dir>``.

Exit codes: 0 every non-control check passed, 1 a check failed, 2 invalid
configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .cloud import GRAPH, PhasePointCloud
from .config import ExperimentConfig, format_spec, parse_spec
from .errors import ConfigInvalid, NoBreakdownInRange, NumericalError, PseudographError
from .flow import FlowConfig, flow_cloud
from .hamiltonian import CompactTube, hessian_bounds, make_hamiltonian
from .laxoleinik import SectionSamples, positive_semigroup
from .semiconcave import enlarged_pseudograph_sample, make_function
from .verify import (
    VerificationReport,
    breakdown_time,
    compare_with_semigroup,
    exactness_test,
    graph_test,
    is_exact,
    lemma3_check,
    lemma4_batch,
    lipschitz_estimate,
    paratingent_vertical_test,
    random_lemma4_draws,
    surjectivity_test,
)

EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

SUMMARY_COLUMNS = ["t", "is_graph", "Lip", "loop_integral", "sup_dist"]
BREAKDOWN_COLUMNS = ["u_name", "K", "c", "C", "t_star", "eps_paper", "eps_derived"]


@contextlib.contextmanager
def _stage(name: str):
    """Re-raise library errors with the pipeline stage prepended."""
    try:
        yield
    except NoBreakdownInRange:
        raise
    except PseudographError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _tag(t: float) -> str:
    return repr(float(t))


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def flow_config(cfg: ExperimentConfig) -> FlowConfig:
    tol = cfg.tolerances
    return FlowConfig(tol.flow_method, tol.flow_step, tol.flow_tolerance, tol.energy_drift_cap)


def _adversarial_cloud(dim: int) -> PhasePointCloud:
    q = np.zeros((2, dim))
    p = np.zeros((2, dim))
    q[1, 0], p[1, 0] = 0.1, 1.0
    return PhasePointCloud(q, p, np.array([GRAPH, GRAPH], dtype=object))


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# theorem suite


def run_theorem_suite(cfg: ExperimentConfig, write: bool = True) -> VerificationReport:
    """Sample E(u), flow it backward, and run every check for each configured time."""
    cfg.validate()
    report = VerificationReport(config=cfg.to_dict())
    report.timestamps["started"] = _now()
    g, tol = cfg.grids, cfg.tolerances
    fcfg = flow_config(cfg)
    with _stage("build"):
        H = make_hamiltonian(cfg.hamiltonian, cfg.dim, **cfg.hamiltonian_params)
        u = make_function(cfg.function, cfg.dim, **cfg.function_params)
    with _stage("enlarged_pseudograph_sample"):
        cloud = enlarged_pseudograph_sample(u, g.base_n, g.fiber_m)
    K = u.K
    report.add("semiconcavity_constant", np.isfinite(K), K, {"K": K, "function": u.label()})

    with _stage("lemma3_check"):
        ok, margin = lemma3_check(cloud, K, tol.lemma3_margin)
        report.add("lemma3", ok, margin, {"K": K, "points": len(cloud)})
        ok, margin = lemma3_check(_adversarial_cloud(cfg.dim), 0.5, tol.lemma3_margin)
        report.add("lemma3_adversarial_control", ok, margin,
                   {"expected_pass": False, "as_designed": not ok}, control=True)

    radius = max(1.0, float(np.max(np.linalg.norm(cloud.p, axis=1))))
    with _stage("hessian_bounds"):
        c, C = hessian_bounds(H, CompactTube(radius), fcfg, tol.hessian_density)
    report.add("hessian_bounds", c > 0, c, {"c": c, "C": C, "fiber_radius": radius})

    if tol.lemma4_draws:
        with _stage("lemma4_check"):
            rng = np.random.default_rng(cfg.seed)
            q, p, dp, t = random_lemma4_draws(cfg.dim, radius, tol.lemma4_draws, tol.lemma4_t_max, rng)
            passed, _, lo_m, up_m, _ = lemma4_batch(H, q, p, dp, t, c, C, fcfg)
        report.add("lemma4", bool(np.all(passed)), float(min(lo_m.min(), up_m.min())),
                   {"draws": tol.lemma4_draws, "failures": int(np.sum(~passed)),
                    "min_lower_margin": float(lo_m.min()), "min_upper_margin": float(up_m.min())})

    with _stage("graph_test"):
        base_graph = graph_test(cloud, g.cell_n, tol.slope_cap)
    has_fiber = bool(np.any(cloud.is_fiber))
    report.add("graph_unflowed_control", base_graph.is_graph, float(-len(base_graph.offending_cells)),
               {"expected_pass": not has_fiber, "as_designed": base_graph.is_graph != has_fiber,
                "offending_cells": base_graph.offending_cells}, control=True)

    control = SectionSamples(g.section_n, cfg.dim, np.zeros((g.section_n,) * cfg.dim), t=0.0,
                             covectors=np.ones((g.section_n,) * cfg.dim + (cfg.dim,)))
    integrals = exactness_test(control)
    report.add("exactness_control", is_exact(integrals, g.section_n), float(np.max(np.abs(integrals))),
               {"integrals": integrals, "expected_pass": False,
                "as_designed": not is_exact(integrals, g.section_n)}, control=True)

    rows, artifacts = [], {}
    for t in cfg.times:
        tag = _tag(t)
        with _stage(f"flow_cloud[t={tag}]"):
            flowed = flow_cloud(H, cloud, -t, fcfg)
        artifacts[f"cloud_t{tag}.csv"] = flowed.to_csv()
        gt = graph_test(flowed, g.cell_n, tol.slope_cap)
        report.add(f"graph[t={tag}]", gt.is_graph, float(-len(gt.offending_cells)),
                   {"offending_cells": gt.offending_cells, "cell_n": g.cell_n, "slope_cap": tol.slope_cap})
        cover = surjectivity_test(flowed, g.cell_n)
        report.add(f"surjectivity[t={tag}]", cover == 1.0, cover - 1.0, {"coverage": cover})
        row = {"t": t, "is_graph": gt.is_graph, "Lip": None, "loop_integral": None, "sup_dist": None}
        if not gt.is_graph:
            for name in ("lipschitz", "paratingent", "exactness", "semigroup_identity"):
                report.add(f"{name}[t={tag}]", False, -1.0, {"skipped": "not a graph"})
            rows.append(row)
            continue
        lip = lipschitz_estimate(flowed, tol.lipschitz_h_min, g.cell_n, tol.slope_cap)
        report.add(f"lipschitz[t={tag}]", np.isfinite(lip), lip, {"Lip": lip, "h_min": tol.lipschitz_h_min})
        para = paratingent_vertical_test(flowed, tol.paratingent_scales, tol.paratingent_growth)
        slopes = [s for s in para.max_slope_by_scale.values() if s is not None]
        report.add(f"paratingent[t={tag}]", not para.vertical, slopes[-1] if slopes else 0.0,
                   {"max_slope_by_scale": {repr(h): s for h, s in para.max_slope_by_scale.items()}})
        integrals = exactness_test(flowed, g.cell_n, tol.slope_cap, g.section_n)
        worst = float(np.max(np.abs(integrals)))
        report.add(f"exactness[t={tag}]", is_exact(integrals, g.section_n), 5.0 / g.section_n - worst,
                   {"integrals": integrals})
        with _stage(f"positive_semigroup[t={tag}]"):
            section = positive_semigroup(u, H, t, g.section_n, g.action_N or None)
        artifacts[f"section_t{tag}.csv"] = section.to_csv()
        sup = compare_with_semigroup(flowed, section, g.cell_n, tol.slope_cap)
        report.add(f"semigroup_identity[t={tag}]", sup <= tol.compare_sup, tol.compare_sup - sup,
                   {"sup_dist": sup, "section_n": g.section_n})
        row.update(Lip=lip, loop_integral=worst, sup_dist=sup)
        rows.append(row)

    report.timestamps["finished"] = _now()
    if write:
        _write_run(cfg, report, rows, artifacts)
    return report


def _write_run(cfg, report, rows, artifacts) -> None:
    out = Path(cfg.output_dir)
    (out / "artifacts").mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(include_timestamps=False), encoding="utf-8")
    (out / "timestamps.json").write_text(json.dumps(report.timestamps, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")
    for name, text in artifacts.items():
        with (out / "artifacts" / name).open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    summary = {"columns": SUMMARY_COLUMNS, "rows": [
        {k: (r[k] if k != "is_graph" else bool(r[k])) for k in SUMMARY_COLUMNS} for r in rows]}
    (out / "artifacts" / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                                                    encoding="utf-8")
    export_plot_data(out)


# ---------------------------------------------------------------------------
# breakdown sweep


def run_breakdown_sweep(cfg: ExperimentConfig, write: bool = True):
    """breakdown_time for each function of ``breakdown.functions`` under the configured H.

    Returns ``(report, rows)`` where each row is ``(u_name, BreakdownResult)``;
    a function whose image never folds is recorded with ``breakdown_found`` false.
    """
    cfg.validate()
    report = VerificationReport(config=cfg.to_dict())
    report.timestamps["started"] = _now()
    fcfg = flow_config(cfg)
    g, tol, b = cfg.grids, cfg.tolerances, cfg.breakdown
    H = make_hamiltonian(cfg.hamiltonian, cfg.dim, **cfg.hamiltonian_params)
    specs = b.functions or (format_spec(cfg.function, cfg.function_params),)
    rows = []
    for spec in specs:
        name, params = parse_spec(spec)
        u = make_function(name, cfg.dim, **params)
        label = format_spec(name, params)
        with _stage(f"breakdown_time[{label}]"):
            try:
                res = breakdown_time(H, u, b.t_lo, b.t_hi, g.cell_n, fcfg, base_n=g.base_n,
                                     fiber_m=g.fiber_m, resolution=b.resolution, slope_cap=tol.slope_cap,
                                     sample_density=tol.hessian_density)
            except NoBreakdownInRange as exc:
                res = exc.result
        rows.append((label, res))
        details = {"t_star": res.t_star_measured if res.breakdown_found else None,
                   "lower_bound_t": None if res.breakdown_found else res.t_star_measured,
                   "bracket": list(res.bracket), "eps_paper": res.epsilon_paper,
                   "eps_derived": res.epsilon_derived, "c": res.c, "C": res.C, "K": res.K,
                   "breakdown_found": res.breakdown_found}
        eps = min(res.epsilon_paper, res.epsilon_derived)
        margin = res.t_star_measured - eps if res.K > 0 else res.t_star_measured
        report.add(f"breakdown[{label}]", res.bound_ok, margin, details)
    report.timestamps["finished"] = _now()
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_breakdown_csv(out / "breakdown.csv", rows)
        (out / "breakdown_report.json").write_text(report.to_json(include_timestamps=False), encoding="utf-8")
    return report, rows


def write_breakdown_csv(path: Path, rows) -> None:
    body = []
    for label, res in rows:
        t_star = res.t_star_measured if res.breakdown_found else None
        body.append([label, _num(res.K), _num(res.c), _num(res.C), _num(t_star),
                     _num(res.epsilon_paper), _num(res.epsilon_derived)])
    _write_csv(path, BREAKDOWN_COLUMNS, body)


# ---------------------------------------------------------------------------
# export


def export_plot_data(run_dir) -> list:
    """Write ``plot/summary.csv`` and per-t cloud CSVs for a completed run directory.

    A directory without run artifacts yields a header-only summary.
    """
    run_dir = Path(run_dir)
    plot = run_dir / "plot"
    plot.mkdir(parents=True, exist_ok=True)
    written = []
    summary_path = run_dir / "artifacts" / "summary.json"
    rows = []
    if summary_path.exists():
        rows = json.loads(summary_path.read_text(encoding="utf-8"))["rows"]
    body = []
    for r in rows:
        body.append([_num(r["t"]), "true" if r["is_graph"] else "false", _num(r["Lip"]),
                     _num(r["loop_integral"]), _num(r["sup_dist"])])
    _write_csv(plot / "summary.csv", SUMMARY_COLUMNS, body)
    written.append(plot / "summary.csv")
    for src in sorted((run_dir / "artifacts").glob("cloud_t*.csv")) if (run_dir / "artifacts").exists() else []:
        dst = plot / src.name
        dst.write_bytes(src.read_bytes())
        written.append(dst)
    if (run_dir / "breakdown.csv").exists():
        dst = plot / "breakdown.csv"
        dst.write_bytes((run_dir / "breakdown.csv").read_bytes())
        written.append(dst)
    return written


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudograph",
                                     description="Flowed enlarged pseudographs and Lax-Oleinik checks")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the theorem suite for a config")
    p.add_argument("config")
    p = sub.add_parser("breakdown", help="measure breakdown times for a config")
    p.add_argument("config")
    p = sub.add_parser("export", help="write plot-ready CSVs for a run directory")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            for path in export_plot_data(args.run_dir):
                print(path)
            return EXIT_PASS
        cfg = ExperimentConfig.load(args.config)
        if args.command == "run":
            report = run_theorem_suite(cfg)
        else:
            report, _ = run_breakdown_sweep(cfg)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PseudographError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(report.summary())
    return EXIT_PASS if report.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
