"""Command line entry point: ``cbflow {run,resume,curvature,project,verify}``.

Exit codes: 0 success, 1 verify failure, 2 usage or configuration error,
3 numerical failure (the error class is named in the manifest).

numpy and the numerical modules are imported inside the commands so that
``--threads`` can size the BLAS pools before numpy loads.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CSV_NAME = "diagnostics.csv"
MANIFEST_NAME = "manifest.json"
CONFIG_ECHO = "config.ini"
BACKGROUND_NAME = "background.chk"


class UsageError(Exception):
    pass


def _threads(args) -> int | None:
    raw = args.threads if args.threads is not None else os.environ.get("CBF_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"--threads/CBF_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"--threads/CBF_THREADS must be a positive integer, got {raw!r}")
    return n


def _apply_threads(n: int | None) -> None:
    # Only BLAS pools are threaded; all reductions in cbflow are numpy
    # pairwise sums over fixed shapes, so results do not depend on n.
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v) if math.isinf(v) else f"{v:.17g}"
    return str(v)


class CsvSink:
    """Streams DiagnosticsRecord rows; the header is written once."""

    def __init__(self, path: Path, columns: list[str], keep: list[list[str]] | None = None):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(columns)
        for row in keep or []:
            self.writer.writerow(row)
        self.fh.flush()

    def __call__(self, record) -> None:
        self.writer.writerow([_fmt(v) for v in record.values()])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _load_config(args):
    from .config import ConfigError, RunConfig

    if not args.config:
        raise UsageError("--config PATH is required")
    try:
        cfg = RunConfig.load(args.config)
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}")
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}")
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + "\n")


def _initial_metric(cfg):
    from .flow import project_constant_scalar

    metric = cfg.make_family().sample_to_grid(cfg.make_grid())
    info = None
    if cfg.projection.enabled:
        metric, info = project_constant_scalar(
            metric, cfg.flow.s0, cfg.projection.tol, max_iter=cfg.projection.max_iter,
            order=cfg.flow.stencil_order, solver=cfg.solver_options())
    return metric, info


def _trajectory(cfg, out: Path, state, ev, monitor, keep_rows=None, manifest_extra=None):
    """Run the flow from ``state`` writing CSV rows and checkpoints; returns exit code."""
    from . import checkpoint as ckpt
    from .diagnostics import record_columns
    from .flow import run

    sink = CsvSink(out / CSV_NAME, record_columns(monitor.m_max), keep_rows)
    interval = cfg.output.checkpoint_interval

    def on_step(st, _ev):
        if interval and st.step % interval == 0:
            path = out / f"step{st.step:08d}.chk"
            ckpt.write(path, ckpt.from_state(st), ckpt.sidecar(st, monitor))

    t0 = time.perf_counter()
    try:
        traj = run(state, cfg.step_policy(), cfg.diagnostics.cadence, monitor=monitor,
                   on_record=sink, on_step=on_step, evaluation=ev)
    finally:
        sink.close()
    manifest = {
        "config": cfg.to_text(),
        "reason": traj.reason,
        "error": traj.error,
        "error_type": traj.error_type,
        "final_step": traj.state.step,
        "final_t": traj.state.t,
        "records": len(traj.records),
        "seconds": time.perf_counter() - t0,
    }
    manifest.update(manifest_extra or {})
    _write_json(out / MANIFEST_NAME, manifest)
    if traj.error_type:
        print(f"numerical failure: {traj.error_type}: {traj.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _numeric_failure(out: Path, cfg, exc: Exception, stage: str) -> int:
    _write_json(out / MANIFEST_NAME, {"config": cfg.to_text(), "reason": "error",
                                      "stage": stage, "error": str(exc),
                                      "error_type": type(exc).__name__})
    print(f"numerical failure during {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_NUMERIC


def _numeric_errors():
    from .flow import FlowError
    from .pressure import PressureFailure

    return (FlowError, PressureFailure)


def cmd_run(args) -> int:
    from . import checkpoint as ckpt
    from .diagnostics import Monitor, Thresholds
    from .flow import initial_state

    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    (out / CONFIG_ECHO).write_text(cfg.to_text())
    try:
        metric, info = _initial_metric(cfg)
    except _numeric_errors() as exc:
        return _numeric_failure(out, cfg, exc, "projection")
    try:
        state, ev = initial_state(metric, cfg.flow.s0, cfg.flow.variant,
                                  policy=cfg.step_policy())
    except _numeric_errors() as exc:
        return _numeric_failure(out, cfg, exc, "initial pressure")
    if state.background is not None:
        ckpt.write(out / BACKGROUND_NAME, ckpt.from_state(replace_metric(state, state.background)))
    d = cfg.diagnostics
    monitor = Monitor(d.m_max, Thresholds(d.K, d.margin_floor))
    extra = {"projection": None if info is None else
             {"iterations": info.iterations, "residual": info.residual}}
    return _trajectory(cfg, out, state, ev, monitor, manifest_extra=extra)


def replace_metric(state, metric):
    from dataclasses import replace

    return replace(state, metric=metric, p=None)


def cmd_resume(args) -> int:
    from . import checkpoint as ckpt
    from .config import ConfigError, RunConfig
    from .diagnostics import Monitor
    from .flow import FlowState, SolveStats

    if not args.resume:
        raise UsageError("--resume CHECKPOINT is required")
    src = Path(args.resume)
    try:
        ck, extra = ckpt.read(src)
    except (OSError, ckpt.CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {src}: {exc}")
    if extra is None:
        raise UsageError(f"checkpoint sidecar {src}.json is missing")
    if args.config:
        cfg = _load_config(args)
    else:
        try:
            cfg = RunConfig.load(src.parent / CONFIG_ECHO)
        except (OSError, ConfigError) as exc:
            raise UsageError(f"no --config given and no usable {CONFIG_ECHO} next to the "
                             f"checkpoint: {exc}")
    if tuple(cfg.grid.sizes) != ck.grid.sizes or cfg.flow.variant != ck.variant:
        raise UsageError("config does not match the checkpoint (grid or variant)")
    out = _out_dir(args, cfg)
    if out.resolve() != src.parent.resolve():
        (out / CONFIG_ECHO).write_text(cfg.to_text())
    background = None
    if ck.variant == "deturck_cbf":
        bg, _ = ckpt.read(src.parent / BACKGROUND_NAME)
        background = ckpt.metric_of(bg)
        if out.resolve() != src.parent.resolve():
            ckpt.write(out / BACKGROUND_NAME, bg)
    state = FlowState(ck.t, ck.step, ckpt.metric_of(ck), ck.s0, ck.variant,
                      p=ck.p if extra["has_pressure"] else None, background=background,
                      solve=SolveStats(**extra["solve"]))
    monitor = Monitor.from_state_dict(extra["monitor"])
    keep = []
    prior = src.parent / CSV_NAME
    if prior.exists():
        _, rows = read_csv(prior)
        keep = [r for r in rows if int(r[0]) <= ck.step]
    return _trajectory(cfg, out, state, None, monitor, keep_rows=keep,
                       manifest_extra={"resumed_from": str(src), "resumed_step": ck.step})


def _bundle_report(metric, order: int) -> dict:
    from .curvature import bach_divergence_residual, cotton_weyl_residual, curvature_bundle
    from .mesh import norms, pointwise_norm_sq
    import numpy as np

    b = curvature_bundle(metric, order, alt=True)
    report = {}
    for name in ("Gamma", "Rm", "Rc", "S", "A", "W", "C", "B", "B_alt"):
        T = getattr(b, name)
        if name == "Gamma":
            sup = float(np.abs(T).max())  # not a tensor; coordinate sup only
            report[name] = {"sup": sup, "l2": None}
            continue
        sup, l2 = norms(T, metric)
        report[name] = {"sup": sup, "l2": l2}
    scale = max(report["B"]["sup"], report["Rm"]["sup"] ** 2)

    def rel(x):
        return x / scale if scale > 0 else x

    cw = math.sqrt(max(float(pointwise_norm_sq(cotton_weyl_residual(b), metric).max()), 0.0))
    dual = math.sqrt(max(float(pointwise_norm_sq(b.B - b.B_alt, metric).max()), 0.0))
    report["residuals"] = {
        "bach_trace_rel": rel(float(np.abs(b.bach_raw_trace).max())),
        "cotton_weyl_sup": cw,
        "bach_divergence_sup": float(bach_divergence_residual(b).max()),
        "dual_bach_sup": dual,
        "dual_bach_rel": rel(dual),
    }
    return report, b


def cmd_curvature(args) -> int:
    from . import checkpoint as ckpt

    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    metric = cfg.make_family().sample_to_grid(cfg.make_grid())
    report, b = _bundle_report(metric, cfg.flow.stencil_order)
    report["grid"] = {"sizes": list(cfg.grid.sizes), "periods": list(cfg.grid.periods)}
    report["family"] = cfg.initial.family
    _write_json(out / "curvature.json", report)
    if cfg.output.dump_fields:
        # checkpoint layout; the scalar slot carries the scalar curvature S
        ckpt.write(out / "fields.chk", ckpt.Checkpoint(metric.grid, cfg.flow.s0, "curvature",
                                                       0.0, 0, metric.g, b.S))
    print(json.dumps(report["residuals"], indent=1))
    return EXIT_OK


def cmd_project(args) -> int:
    from . import checkpoint as ckpt
    from .diagnostics import Monitor, Thresholds
    from .flow import initial_state, project_constant_scalar

    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    (out / CONFIG_ECHO).write_text(cfg.to_text())
    metric = cfg.make_family().sample_to_grid(cfg.make_grid())
    try:
        projected, info = project_constant_scalar(
            metric, cfg.flow.s0, cfg.projection.tol, max_iter=cfg.projection.max_iter,
            order=cfg.flow.stencil_order, solver=cfg.solver_options())
        state, _ = initial_state(projected, cfg.flow.s0, cfg.flow.variant,
                                 policy=cfg.step_policy())
    except _numeric_errors() as exc:
        return _numeric_failure(out, cfg, exc, "projection")
    d = cfg.diagnostics
    monitor = Monitor(d.m_max, Thresholds(d.K, d.margin_floor))
    ckpt.write(out / "projected.chk", ckpt.from_state(state), ckpt.sidecar(state, monitor))
    if state.background is not None:
        ckpt.write(out / BACKGROUND_NAME, ckpt.from_state(replace_metric(state, state.background)))
    _write_json(out / MANIFEST_NAME, {"config": cfg.to_text(), "reason": "projected",
                                      "iterations": info.iterations, "residual": info.residual,
                                      "error": None, "error_type": None})
    print(f"projected in {info.iterations} iterations, residual {info.residual:.3e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, resolve, run_suites

    selector = "all" if args.suite is None else args.suite
    try:
        resolve(selector)
    except ValueError as exc:
        raise UsageError(str(exc))
    t0 = time.perf_counter()
    results = run_suites(selector, seed=args.seed, corrupt_stencil=args.corrupt_stencil)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in "
          f"{time.perf_counter() - t0:.1f} s")
    if failed:
        print("FAILED: " + "; ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbflow", description="Conformal Bach flow on periodic grids.")
    parser.add_argument("--threads", type=str, default=None,
                        help="data-parallel width (falls back to CBF_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", metavar="PATH")
            p.add_argument("--out", metavar="DIR")
        p.add_argument("--threads", type=str, default=argparse.SUPPRESS)

    p = sub.add_parser("run", help="project initial data, then run the flow")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    common(p)
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_resume)
    p = sub.add_parser("curvature", help="one curvature bundle with norms and residuals")
    common(p)
    p.set_defaults(func=cmd_curvature)
    p = sub.add_parser("project", help="constant scalar curvature projection only")
    common(p)
    p.set_defaults(func=cmd_project)
    p = sub.add_parser("verify", help="run invariant suites")
    common(p, config=False)
    p.add_argument("--suite", metavar="NAME", default=None,
                   help="comma-separated: all, curvature, oracle, pressure, flow, configs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-stencil", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        _apply_threads(_threads(args))
        return args.func(args)
    except UsageError as exc:
        print(f"cbflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
