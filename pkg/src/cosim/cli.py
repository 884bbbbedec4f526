"""Command-line entry point.

Exit codes: 0 on success, 2 on a configuration or input error, 3 when a run
aborts on the livelock guard.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from cosim.engine import SWEEP_AXES, LivelockError, RunConfig, run, sweep
from cosim.perf_model import (
    DegenerateGridError,
    OracleParams,
    fit,
    fit_error_p99,
    profile,
    read_samples,
    write_profile,
)
from cosim.scheduler import POLICIES, SchedulerPolicy
from cosim.types import ConfigError
from cosim.workload import (
    LengthSpec,
    OfflineSpec,
    OnlineSpec,
    TraceError,
    WorkloadSpec,
    generate,
    save_trace,
)

EXIT_OK, EXIT_CONFIG, EXIT_LIVELOCK = 0, 2, 3

log = logging.getLogger("cosim")


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _oracle_from(doc: dict) -> OracleParams:
    """Accept either a bare oracle object or a run config with an ``oracle`` key."""
    try:
        return OracleParams.from_dict(doc.get("oracle", doc))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad oracle parameters: {exc}") from None


def cmd_profile(args: argparse.Namespace) -> int:
    params = _oracle_from(_load_json(args.model_config))
    if args.noise_cv is not None:
        params = replace(params, noise_cv=args.noise_cv)
    samples = profile(params, seed=args.seed)
    write_profile(args.out, samples, fit(samples))
    log.info("wrote %d samples to %s", len(samples), args.out)
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    try:
        samples = read_samples(args.samples)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.samples}: {exc}") from None
    coeffs = fit(samples)
    write_profile(args.out, samples, coeffs)
    print(json.dumps({**coeffs.to_dict(), "fit_error_p99": fit_error_p99(coeffs, samples)}, sort_keys=True))
    return EXIT_OK


def cmd_gen_trace(args: argparse.Namespace) -> int:
    lengths = LengthSpec(args.in_tokens, args.out_tokens, args.lengths_file)
    spec = WorkloadSpec(
        online=OnlineSpec(args.rate, args.cv, args.duration, lengths),
        offline=OfflineSpec(args.backlog, LengthSpec(args.in_tokens, args.out_tokens, args.lengths_file)),
        seed=args.seed,
    )
    reqs = generate(spec)
    save_trace(reqs, args.out)
    log.info("wrote %d requests to %s", len(reqs), args.out)
    return EXIT_OK


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "policy", None):
        cfg = replace(cfg, policy=SchedulerPolicy.from_dict(args.policy))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, workload=replace(cfg.workload, seed=args.seed))
    if getattr(args, "duration", None) is not None:
        cfg = replace(cfg, workload=cfg.workload.with_online(duration=args.duration))
    if getattr(args, "no_events", False):
        cfg = replace(cfg, record_events=False)
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    res = run(cfg)
    res.write(args.out, figures=args.figures)
    r = res.report
    print(json.dumps({
        "ttft_p99": r.ttft_p99, "tbt_p99": r.tbt_p99,
        "ttft_attainment": r.ttft_attainment, "tbt_attainment": r.tbt_attainment,
        "offline_throughput": r.offline_throughput, "preemptions": r.preemptions,
    }, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = replace(_config(args), record_events=False)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    policies = args.policies.split(",") if args.policies else [base.policy.name]
    rows = []
    for p in policies:
        cfg = replace(base, policy=SchedulerPolicy.from_dict(p))
        for v, rep in zip(values, sweep(cfg, args.axis, values, workers=args.workers)):
            rows.append({"policy": p, "axis": args.axis, "value": v, **rep.to_dict()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if args.figures:
        from cosim.plotting import plot_sweep

        plot_sweep(rows, args.axis, out / f"sweep_{args.axis}.png")
    for row in rows:
        print(f"{row['policy']:>20} {args.axis}={row['value']:<6g} ttft_p99={row['ttft_p99']} "
              f"tbt_p99={row['tbt_p99']} tbt_att={row['tbt_attainment']} "
              f"tput={row['offline_throughput']:.1f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from cosim.plotting import render_dir

    d = Path(args.run_dir)
    if not (d / "metrics.json").exists():
        raise ConfigError(f"{d} has no metrics.json")
    for p in render_dir(d):
        print(p)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    from cosim.calibration import DATA_DIR, anchor_check, derive_8b, write_configs

    print("8B anchors (ms): %.3f %.3f" % anchor_check(derive_8b()))
    for p in write_configs(args.out or DATA_DIR):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cosim", description="Co-serving scheduler simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("profile", help="sample the latency oracle over the (P, C) grid")
    p.add_argument("--model-config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-cv", type=float, default=None)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("fit", help="fit latency coefficients to profile samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("gen-trace", help="write a synthetic JSONL trace")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--cv", type=float, default=1.0)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--in-tokens", type=int, default=4096)
    p.add_argument("--out-tokens", type=int, default=256)
    p.add_argument("--lengths-file", default=None)
    p.add_argument("--backlog", type=int, default=0, help="offline requests at t=0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_trace)

    def run_args(q: argparse.ArgumentParser) -> None:
        q.add_argument("--config", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--policy", choices=POLICIES, default=None)
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--duration", type=float, default=None, help="override online duration (s)")
        q.add_argument("--figures", action="store_true", help="render PNG figures")

    p = sub.add_parser("run", help="simulate one configuration")
    run_args(p)
    p.add_argument("--no-events", action="store_true", help="skip events.jsonl content")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="simulate one axis of values")
    run_args(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--policies", default=None, help="comma-separated policy names")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="render figures for an existing run directory")
    p.add_argument("run_dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("calibrate", help="rewrite the shipped 8B/70B configs")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_calibrate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, TraceError, DegenerateGridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LivelockError as exc:
        print(f"livelock: {exc}", file=sys.stderr)
        return EXIT_LIVELOCK


if __name__ == "__main__":
    sys.exit(main())
