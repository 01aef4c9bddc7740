"""``hammersim`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analysis
from .config import ConfigError, load_config
from .dram import CommandRejected, TraceFormatError, read_trace, write_trace
from .engine import Engine, SimConfig, write_flip_log
from .faults import PROFILES, ProfileTooLarge, generate_victim_map, get_profile
from .mitigations import ReservePoolExhausted
from .rng import derive_seed
from .workloads import KINDS, InvalidSpec, PatternSpec, compress_trace, expand_trace, generate_trace

log = logging.getLogger("hammersim")


def _config(path) -> SimConfig:
    return load_config(path) if path else SimConfig()


def cmd_run(args) -> int:
    cfg = replace(_config(args.config), trace_path=args.trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    engine = Engine(cfg)
    metrics, flips = engine.run(compress_trace(read_trace(args.trace)))
    (out / "metrics.txt").write_text(metrics.to_text(), encoding="utf-8")
    (out / "metrics.csv").write_text(metrics.csv_header() + "\n" + metrics.to_csv_row() + "\n", encoding="utf-8")
    write_flip_log(flips, out / "flips.csv")
    with open(out / "flips_by_row.csv", "w", encoding="utf-8") as fh:
        fh.write("bank,row,flips\n")
        for (bank, row), n in sorted(metrics.flips_by_row.items()):
            fh.write(f"{bank},{row},{n}\n")
    sys.stdout.write(metrics.to_text())
    if metrics.protocol_violations:
        for line, msg in engine.rejections[:20]:
            print(f"violation at line {line}: {msg}", file=sys.stderr)
        return 2
    return 0


def cmd_gen_trace(args) -> int:
    cfg = _config(args.config)
    if args.pattern == "single_sided":
        rows = (args.row,)
    elif args.pattern == "double_sided" and args.row2 is None:
        raise InvalidSpec("double_sided needs --row2")
    else:
        # random/benign_stream: --row..--row2 range, or the whole bank
        rows = () if args.row2 is None else (args.row, args.row2)
    seed = derive_seed(cfg.seed if args.seed is None else args.seed, "workload")
    spec = PatternSpec(args.pattern, args.bank, rows, args.count, args.period_ns, seed, args.col)
    items = generate_trace(spec, cfg.timing, cfg.geometry)
    n = write_trace(expand_trace(items), args.out, header=f"hammersim gen-trace {args.pattern}")
    print(f"wrote {n} commands to {args.out}")
    return 0


def cmd_gen_profile(args) -> int:
    cfg = _config(args.config)
    profile = get_profile(args.name).scaled(args.scale)
    if cfg.profile.name != "NULL":
        profile = profile.with_thresholds(cfg.profile.threshold_min, cfg.profile.threshold_max,
                                          cfg.profile.threshold_distribution)
    vm = generate_victim_map(profile, cfg.geometry, derive_seed(args.seed, "victim-map"))
    vm.save(args.out)
    print(f"wrote {len(vm)} victim cells ({profile.total_words} words) to {args.out}")
    return 0


def cmd_sweep_refresh(args) -> int:
    cfg = _config(args.config)
    intervals = [float(v) if "." in v else int(v) for v in args.intervals_ms.split(",") if v.strip()]
    profiles = [p.strip() for p in args.profile.split(",") if p.strip()]
    spec = analysis.SweepSpec("refresh_interval_ms", intervals, cfg, base_seed=cfg.seed)
    rows = analysis.sweep_refresh(spec, profiles, workers=args.workers)
    text = analysis.table_to_csv(rows)
    Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_validate_para(args) -> int:
    res = analysis.monte_carlo_para(args.p, args.n, args.trials, args.seed, args.both_sides)
    lo, hi = res.interval
    print(f"empirical = {res.estimate:.6f} ({res.failures}/{res.trials})")
    print(f"3-sigma interval = [{lo:.6f}, {hi:.6f}] (half-width {res.half_width:.6f})")
    print(f"analytic = {res.analytic:.6g}")
    print("agree" if res.brackets_analytic else "DISAGREE")
    return 0 if res.brackets_analytic else 3


def cmd_report(args) -> int:
    summary, csv = analysis.report(args.files)
    sys.stdout.write(summary)
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    else:
        sys.stdout.write("\n" + csv)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hammersim", description="RowHammer DRAM controller simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one trace")
    p.add_argument("--config")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-trace", help="write an access-pattern trace")
    p.add_argument("--pattern", choices=KINDS, required=True)
    p.add_argument("--row", type=int, default=0, help="aggressor, or low end of the row range")
    p.add_argument("--row2", type=int, help="second aggressor, or high end of the row range")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--bank", type=int, default=0)
    p.add_argument("--col", type=int, default=0)
    p.add_argument("--period-ns", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("gen-profile", help="write a victim map for a built-in profile")
    p.add_argument("--name", choices=list(PROFILES), type=str.upper, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scale", type=int, default=1, help="divide the profile counts by this")
    p.add_argument("--config", help="geometry and threshold settings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_profile)

    p = sub.add_parser("sweep-refresh", help="flips versus refresh interval")
    p.add_argument("--intervals-ms", default="8,16,32,64,128")
    p.add_argument("--profile", required=True, help="profile name, or a comma-separated list")
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_refresh)

    p = sub.add_parser("validate-para", help="Monte Carlo check of the PARA failure probability")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--both-sides", action="store_true")
    p.set_defaults(func=cmd_validate_para)

    p = sub.add_parser("report", help="summarise and merge metrics.txt files")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", help="write the merged CSV here instead of stdout")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TraceFormatError as exc:
        print(f"error: trace line {exc.line}: {exc}", file=sys.stderr)
    except (ConfigError, InvalidSpec, ProfileTooLarge, ReservePoolExhausted,
            analysis.MalformedMetricsFile, CommandRejected, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
