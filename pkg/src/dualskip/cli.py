"""Command-line front end.

Subcommands:
    run       adaptive rollout of one scenario (plus paired baseline)
    baseline  full-compute rollout of one scenario
    sweep     factorial ablation sweep, CSV report
    audit     invariant checks over a trace file

Exit codes: 0 success, 1 audit found violations, 2 invalid input.
The default output directory comes from ``DUALSKIP_OUTPUT_DIR`` (else ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import bench
from .rollout import PRESETS, load_scenario, run_rollout
from .types import BRANCHES, ConfigError, ControllerConfig, load_config, make_uniform_grid, validate_config

OUTPUT_ENV = "DUALSKIP_OUTPUT_DIR"

_OVERRIDES = (
    ("theta", float), ("warmup", int), ("c_max", int), ("epsilon", float), ("gamma", float),
    ("lambda", float),
)


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _add_scenario_args(p):
    p.add_argument("--scenario", type=Path, help="scenario file (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="curved")
    p.add_argument("--steps", type=int, default=10, help="rollout steps for affine/curved presets")
    p.add_argument("--seed", type=int, help="override the scenario noise seed")
    p.add_argument("-K", "--K", dest="K", type=int, default=100, help="diffusion steps")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="controller config file")
    for key, typ in _OVERRIDES:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", type=typ, default=None,
                       metavar=key.upper(), help=f"override config key '{key}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualskip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("run", "adaptive rollout with paired baseline"),
                        ("baseline", "full-compute rollout")):
        p = sub.add_parser(name, help=help_)
        _add_scenario_args(p)
        _add_config_args(p)

    p = sub.add_parser("sweep", help="ablation sweep")
    _add_scenario_args(p)
    _add_config_args(p)
    p.add_argument("--thetas", type=_float_list, default=[0.005, 0.01, 0.02])
    p.add_argument("--c-maxes", type=_int_list, default=[2, 4, 8])
    p.add_argument("--warmups", type=_int_list, default=[0, 3, 5])
    p.add_argument("--epsilons", type=_float_list, default=[1e-6, 1e-4, 1e-2])
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("audit", help="check invariants over a trace file")
    p.add_argument("trace", type=Path)
    p.add_argument("--summary", type=Path, help="summary CSV to cross-check against the trace")
    return parser


def _config(args) -> ControllerConfig:
    data = load_config(args.config).to_dict() if args.config else ControllerConfig().to_dict()
    for key, _ in _OVERRIDES:
        value = getattr(args, f"cfg_{key}")
        if value is not None:
            data[key] = value
    return ControllerConfig.from_mapping(data)


def _scenario(args):
    if args.scenario:
        spec = load_scenario(args.scenario)
    elif args.preset == "mixed":
        spec = PRESETS["mixed"]()
    else:
        spec = PRESETS[args.preset](steps=args.steps)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    return spec


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUTPUT_ENV, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def _cmd_rollout(args, force_baseline: bool) -> int:
    cfg = _config(args)
    grid = make_uniform_grid(args.K)
    validate_config(cfg, grid.K)
    spec = _scenario(args)
    if force_baseline:
        result = run_rollout(spec, cfg, grid, baseline=False, force_compute=BRANCHES)
    else:
        result = run_rollout(spec, cfg, grid)
    out = _out_dir(args)
    prefix = "baseline_" if force_baseline else ""
    bench.emit_trace(result, out / f"{prefix}trace.ndjson")
    print(f"wrote {out / f'{prefix}trace.ndjson'}")
    _write(out / f"{prefix}summary.csv",
           bench.rows_csv(bench.summary_rows(result), bench.SUMMARY_COLUMNS))
    rc = bench.rollout_cost(result)
    metrics = {
        "K": grid.K, "steps": spec.steps, "config": cfg.to_dict(),
        "compute_ratio": {b.value: result.compute_ratio[b] for b in BRANCHES},
        "eval_counts": {b.value: result.eval_counts[b] for b in BRANCHES},
        "speedup": {"vision": rc.speedup_vision, "trajectory": rc.speedup_trajectory,
                    "diffusion": rc.speedup_diffusion, "total": rc.speedup_total},
    }
    if result.baseline_steps is not None:
        metrics["max_l2_vs_baseline"] = {b.value: max(result.errors_vs_baseline[b])
                                         for b in BRANCHES}
    _write(out / f"{prefix}metrics.json", json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = make_uniform_grid(args.K)
    sweep = bench.SweepSpec(thetas=args.thetas, c_maxes=args.c_maxes, warmups=args.warmups,
                            epsilons=args.epsilons, repetitions=args.repetitions, base=cfg)
    for point in sweep.points():
        validate_config(point, grid.K)
    rows = bench.run_sweep(sweep, _scenario(args), grid, workers=args.workers)
    _write(_out_dir(args) / "sweep.csv", bench.sweep_csv(rows))
    failed = sum(1 for r in rows if r["status"] != "ok")
    if failed:
        print(f"{failed} of {len(rows)} sweep points failed", file=sys.stderr)
    return 0


def _cmd_audit(args) -> int:
    trace = bench.load_trace(args.trace)
    problems = bench.audit_trace(trace)
    if args.summary:
        try:
            with args.summary.open(newline="", encoding="utf-8") as fh:
                problems += bench.audit_summaries(trace, list(csv.DictReader(fh)))
        except OSError as exc:
            raise ConfigError(f"cannot read {args.summary}: {exc}") from exc
    for p in problems:
        print(p)
    print(f"{len(trace)} records, {len(problems)} violations")
    return 1 if problems else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_rollout(args, force_baseline=False)
        if args.command == "baseline":
            return _cmd_rollout(args, force_baseline=True)
        if args.command == "sweep":
            return _cmd_sweep(args)
        return _cmd_audit(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
