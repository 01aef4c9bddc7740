"""Experiment drivers: refresh-interval and PARA sweeps, the PARA Monte Carlo
check, and merging of per-run metrics files."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .dram import Geometry, RowAddress
from .engine import METRIC_FIELDS, Engine, MitigationConfig, SimConfig, build_victim_map
from .faults import get_profile
from .mitigations import ParaConfig, ParaPolicy, para_failure_probability
from .workloads import PatternSpec, generate_trace, hammer_every_row

SWEEP_PARAMETERS = ("refresh_interval_ms", "para_p")


class MalformedMetricsFile(ValueError):
    pass


@dataclass
class SweepSpec:
    parameter: str
    values: list
    base: SimConfig = field(default_factory=SimConfig)
    trials_per_point: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.parameter == "refresh_interval_ms":
            if any(v <= 0 for v in self.values):
                raise ValueError("refresh intervals must be positive")
            if list(self.values) != sorted(self.values):
                raise ValueError("refresh intervals must be given in increasing order")
        if self.trials_per_point < 1:
            raise ValueError("trials_per_point must be >= 1")

    def point_seed(self, index: int) -> int:
        return self.base_seed + index


def interval_scale(base: SimConfig, interval_ms) -> Fraction:
    """refresh_scale that stretches or shrinks the window to ``interval_ms``."""
    return Fraction(base.timing.retention_window_ns) / (Fraction(str(interval_ms)) * 1_000_000)


def _hammer_all_trace(base: SimConfig, longest_ms) -> list:
    count = math.ceil(Fraction(str(longest_ms)) * 1_000_000 / base.timing.t_rc_ns)
    return hammer_every_row(base.geometry, base.timing, count)


def _refresh_point(args) -> int:
    config, victims, trace = args
    metrics, _ = Engine(config, victims).run(trace)
    return metrics.flips_total


def sweep_refresh(spec: SweepSpec, profiles: Sequence[str], workers: int = 1) -> list[dict]:
    """Flips per (interval, profile) under worst-case hammering of every row.

    Every row is hammered single-sided for the longest interval in the
    sweep.  A profile's victim map is drawn once from ``spec.base_seed`` and
    shared by all points, so the points differ only in refresh rate.
    Rows come back ordered by interval.
    """
    if spec.parameter != "refresh_interval_ms":
        raise ValueError("sweep_refresh needs parameter refresh_interval_ms")
    base = replace(spec.base, mitigation=MitigationConfig(), seed=spec.base_seed)
    trace = _hammer_all_trace(base, max(spec.values))
    jobs = []
    for name in profiles:
        profile = get_profile(name) if isinstance(name, str) else name
        cfg = replace(base, profile=profile)
        victims = build_victim_map(cfg)
        for i, interval in enumerate(spec.values):
            timing = replace(cfg.timing, refresh_scale=interval_scale(cfg, interval))
            jobs.append((replace(cfg, timing=timing, seed=spec.point_seed(i)), victims, trace))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            flips = list(pool.map(_refresh_point, jobs))
    else:
        flips = [_refresh_point(j) for j in jobs]
    names = [p if isinstance(p, str) else p.name for p in profiles]
    rows = [{"interval_ms": v} for v in spec.values]
    it = iter(flips)
    for name in names:
        for row in rows:
            row[name] = next(it)
    return rows


def sweep_para(spec: SweepSpec, closures: int, row: int = 1, bank: int = 0) -> list[dict]:
    """PARA on a single-sided hammer of ``row`` for each probability in the sweep."""
    if spec.parameter != "para_p":
        raise ValueError("sweep_para needs parameter para_p")
    trace = generate_trace(PatternSpec("single_sided", bank, (row,), closures), spec.base.timing, spec.base.geometry)
    out = []
    for i, p in enumerate(spec.values):
        mit = replace(spec.base.mitigation, kind="para", p=float(p))
        cfg = replace(spec.base, mitigation=mit, seed=spec.point_seed(i))
        m, _ = Engine(cfg).run(trace)
        out.append({
            "p": p,
            "flips_total": m.flips_total,
            "total_activations": m.total_activations,
            "mitigation_extra_activations": m.mitigation_extra_activations,
            "overhead_ratio": m.overhead_ratio,
        })
    return out


def table_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)]
    lines += [",".join(str(r[c]) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MonteCarloResult:
    estimate: float
    half_width: float
    trials: int
    failures: int
    analytic: float

    @property
    def interval(self) -> tuple[float, float]:
        return self.estimate - self.half_width, self.estimate + self.half_width

    @property
    def brackets_analytic(self) -> bool:
        lo, hi = self.interval
        return lo <= self.analytic <= hi


def monte_carlo_para(p: float, n: int, trials: int, seed: int, both_sides: bool = False) -> MonteCarloResult:
    """Estimate how often one fixed neighbour of a row closed ``n`` times is
    never refreshed by PARA; the half-width is 3 binomial standard errors.

    Drives the real :class:`ParaPolicy` on a row with neighbours on both
    sides, skipping quiet stretches the same way the engine does.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if n < 0:
        raise ValueError("n must be >= 0")
    geom = Geometry(banks=1, rows_per_bank=3, words_per_row=1)
    aggressor, victim = RowAddress(0, 1), RowAddress(0, 2)

    def neighbors(addr):
        return (RowAddress(0, addr.row - 1) if addr.row > 0 else None,
                RowAddress(0, addr.row + 1) if addr.row + 1 < geom.rows_per_bank else None)

    policy = ParaPolicy(ParaConfig(p, both_sides, seed), neighbors)
    failures = 0
    for _ in range(trials):
        left, hit = n, False
        while left:
            quiet = min(left, policy.burst_horizon(aggressor))
            if quiet:
                policy.skip(aggressor, int(quiet), 0)
                left -= int(quiet)
                continue
            actions = policy.on_row_close(aggressor, 0)
            left -= 1
            hit = hit or any((a.bank, a.row) == victim for a in actions)
        failures += not hit
    est = failures / trials
    half = 3.0 * math.sqrt(est * (1.0 - est) / trials)
    return MonteCarloResult(est, half, trials, failures, para_failure_probability(p, n, both_sides))


# -- report -----------------------------------------------------------------

_OPTIONAL = {"first_flip_time_ns"}


def read_metrics(path) -> dict:
    """Parse a ``key = value`` metrics block written by ``run``."""
    values: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise MalformedMetricsFile(f"{path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in METRIC_FIELDS:
            raise MalformedMetricsFile(f"{path}:{lineno}: unexpected line {raw!r}")
        if key in _OPTIONAL and value == "none":
            values[key] = None
            continue
        try:
            values[key] = int(value)
        except ValueError:
            raise MalformedMetricsFile(f"{path}:{lineno}: {key} is not an integer") from None
    missing = [k for k in METRIC_FIELDS if k not in values]
    if missing:
        raise MalformedMetricsFile(f"{path}: missing {', '.join(missing)}")
    return values


def merge_metrics(runs: Iterable[dict]) -> dict:
    """Componentwise sums; the two timestamps merge as earliest first flip
    and latest end time."""
    total: dict = {k: 0 for k in METRIC_FIELDS}
    total["first_flip_time_ns"] = None
    for run in runs:
        for k in METRIC_FIELDS:
            v = run[k]
            if k == "first_flip_time_ns":
                if v is not None and (total[k] is None or v < total[k]):
                    total[k] = v
            elif k == "simulated_end_time_ns":
                total[k] = max(total[k], v)
            else:
                total[k] += v
    return total


def _ratio(m: dict) -> float:
    return m["mitigation_extra_activations"] / m["total_activations"] if m["total_activations"] else 0.0


def report(files: Sequence) -> tuple[str, str]:
    """Returns (human-readable summary, merged CSV with one row per file and
    a final ``TOTAL`` row)."""
    if not files:
        raise ValueError("report needs at least one metrics file")
    runs = [read_metrics(f) for f in files]
    total = merge_metrics(runs)

    def row(name, m):
        cells = [str(name)] + ["" if m[k] is None else str(m[k]) for k in METRIC_FIELDS]
        return ",".join(cells + [f"{_ratio(m):.6f}"])

    csv_lines = [",".join(["source", *METRIC_FIELDS, "overhead_ratio"])]
    csv_lines += [row(f, m) for f, m in zip(files, runs)]
    csv_lines.append(row("TOTAL", total))

    uncorrectable = total["ecc_detected_uncorrectable"] + total["ecc_silent_corruption"]
    summary = [
        f"runs: {len(runs)}",
        f"flips: {total['flips_total']} ({total['flips_in_service']} in service)",
        f"activations: {total['total_activations']} "
        f"(mitigation extra {total['mitigation_extra_activations']}, overhead {_ratio(total):.6f})",
        "ecc words: clean {ecc_clean}, corrected {ecc_corrected}, "
        "detected uncorrectable {ecc_detected_uncorrectable}, silent {ecc_silent_corruption}".format(**total),
        f"uncorrectable or silent words: {uncorrectable}",
        f"protocol violations: {total['protocol_violations']}",
    ]
    return "\n".join(summary) + "\n", "\n".join(csv_lines) + "\n"
