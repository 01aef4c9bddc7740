"""Deterministic event loop tying DRAM, fault model and mitigation together."""

from __future__ import annotations

import heapq
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Optional

from .dram import (
    ALL_ONES,
    AdjacencyMap,
    CommandRejected,
    ProtocolViolation,
    Command,
    DramState,
    Geometry,
    Kind,
    Memory,
    RefreshRoundDone,
    RefreshSchedule,
    RowAddress,
    RowClosed,
    RowOpened,
    TimingParams,
    WordRead,
    WordWritten,
    adjacency,
    apply_command,
    read_trace,
)
from .faults import PROFILES, FaultModel, FlipRecord, VictimMap, VictimProfile, generate_victim_map
from .mitigations import (
    CounterPolicy,
    CounterTable,
    DynamicRemapPolicy,
    EccClass,
    MitigationPolicy,
    NeighborRefresh,
    ParaConfig,
    ParaPolicy,
    RemapRow,
    RemapTable,
    classify_word,
    increased_refresh,
    remap_static,
)
from .rng import derive_seed
from .workloads import Burst, TraceItem, compress_trace, hammer_every_row

log = logging.getLogger(__name__)

MITIGATION_KINDS = ("none", "para", "refresh", "counter", "static_remap", "dynamic_remap")


@dataclass
class MitigationConfig:
    kind: str = "none"
    p: float = 0.001
    both_sides: bool = False
    scale: Fraction = Fraction(1)
    threshold: Optional[int] = None
    capacity: Optional[int] = None
    reserve_rows: int = 16

    def __post_init__(self):
        if self.kind not in MITIGATION_KINDS:
            raise ValueError(f"unknown mitigation kind {self.kind!r}")


@dataclass
class EccConfig:
    enabled: bool = False
    scrub_on_refresh: bool = True


@dataclass
class SimConfig:
    geometry: Geometry = field(default_factory=Geometry)
    timing: TimingParams = field(default_factory=TimingParams)
    profile: VictimProfile = PROFILES["NULL"]
    victim_map_path: Optional[str] = None
    adjacency_path: Optional[str] = None
    fault_enabled: bool = True
    fill: int = ALL_ONES
    auto_refresh: bool = True
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    ecc: EccConfig = field(default_factory=EccConfig)
    seed: int = 0
    trace_path: Optional[str] = None

    def effective_timing(self) -> TimingParams:
        if self.mitigation.kind == "refresh":
            return increased_refresh(self.timing, self.mitigation.scale)
        return self.timing


METRIC_FIELDS = (
    "total_activations",
    "mitigation_extra_activations",
    "refresh_rounds",
    "flips_total",
    "flips_in_service",
    "ecc_clean",
    "ecc_corrected",
    "ecc_detected_uncorrectable",
    "ecc_silent_corruption",
    "ecc_corrections",
    "ecc_detections",
    "ecc_miscorrections",
    "remaps",
    "first_flip_time_ns",
    "simulated_end_time_ns",
    "protocol_violations",
    "commands",
)


@dataclass
class Metrics:
    """Run totals.  ``ecc_*`` class counts classify every victim word by the
    most wrong bits it held at once; ``ecc_corrections``/``detections``/
    ``miscorrections`` count ECC checks that fired (only with ECC on)."""

    total_activations: int = 0
    mitigation_extra_activations: int = 0
    refresh_rounds: int = 0
    flips_total: int = 0
    flips_in_service: int = 0
    ecc_clean: int = 0
    ecc_corrected: int = 0
    ecc_detected_uncorrectable: int = 0
    ecc_silent_corruption: int = 0
    ecc_corrections: int = 0
    ecc_detections: int = 0
    ecc_miscorrections: int = 0
    remaps: int = 0
    first_flip_time_ns: Optional[int] = None
    simulated_end_time_ns: int = 0
    protocol_violations: int = 0
    commands: int = 0
    flips_by_row: Counter = field(default_factory=Counter)

    @property
    def overhead_ratio(self) -> float:
        if not self.total_activations:
            return 0.0
        return self.mitigation_extra_activations / self.total_activations

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_FIELDS}

    def to_text(self) -> str:
        lines = []
        for name, value in self.as_dict().items():
            lines.append(f"{name} = {'none' if value is None else value}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(METRIC_FIELDS)

    def to_csv_row(self) -> str:
        return ",".join("" if v is None else str(v) for v in self.as_dict().values())

    def ecc_class_counts(self) -> dict[EccClass, int]:
        return {
            EccClass.CLEAN: self.ecc_clean,
            EccClass.CORRECTED: self.ecc_corrected,
            EccClass.DETECTED_UNCORRECTABLE: self.ecc_detected_uncorrectable,
            EccClass.SILENT_CORRUPTION: self.ecc_silent_corruption,
        }


def build_victim_map(config: SimConfig) -> VictimMap:
    geom = config.geometry
    if not config.fault_enabled:
        return VictimMap.empty(geom)
    if config.victim_map_path:
        return VictimMap.load(config.victim_map_path, geom)
    if config.profile.total_words == 0:
        return VictimMap.empty(geom)
    return generate_victim_map(config.profile, geom, derive_seed(config.seed, "victim-map"))


def static_remap_table(config: SimConfig, victims: VictimMap) -> RemapTable:
    """One-time profiling: hammer every physical row for two nominal windows
    (so every victim sees a full refresh interval of activations), then
    retire the rows that flipped."""
    geom = config.geometry
    base = AdjacencyMap.load(config.adjacency_path, geom) if config.adjacency_path else None
    table = RemapTable.for_geometry(geom, config.mitigation.reserve_rows, base)
    nominal = replace(config.timing, refresh_scale=Fraction(1))
    probe = replace(config, timing=nominal, mitigation=MitigationConfig(), ecc=EccConfig(), auto_refresh=True,
                    adjacency_path=None)
    trace = hammer_every_row(geom, nominal, 2 * nominal.max_activations_per_window)
    _, flips = Engine(probe, victims).run(trace)
    return remap_static(flips, table)


class Engine:
    """One simulation: feed it trace items with :meth:`run`.

    Scheduled refresh is resolved lazily (the fault model asks the
    :class:`RefreshSchedule` when a row was last refreshed), so idle time
    costs nothing.  Single-row :class:`Burst` items are fast-forwarded when
    the active policy can say how long it will stay quiet.
    """

    def __init__(self, config: SimConfig, victims: Optional[VictimMap] = None,
                 remap: Optional[RemapTable] = None):
        self.config = config
        self.geom = geom = config.geometry
        self.timing = config.effective_timing()
        self.state = DramState(geom)
        self.schedule = RefreshSchedule(geom, self.timing, enabled=config.auto_refresh)
        if victims is None:
            victims = build_victim_map(config)
        if not config.fault_enabled:
            victims = VictimMap.empty(geom)
        kind = config.mitigation.kind
        if remap is None and kind == "static_remap":
            remap = static_remap_table(config, victims)
        if remap is None and kind == "dynamic_remap":
            if not config.ecc.enabled:
                raise ValueError("dynamic_remap needs ecc.enabled = true to see any errors")
            base = AdjacencyMap.load(config.adjacency_path, geom) if config.adjacency_path else None
            remap = RemapTable.for_geometry(geom, config.mitigation.reserve_rows, base)
        self.remap = remap
        if remap is not None:
            self.adj = remap.adjacency
        elif config.adjacency_path:
            self.adj = AdjacencyMap.load(config.adjacency_path, geom)
        else:
            self.adj = AdjacencyMap.identity(geom)
        self.memory = Memory(geom, config.fill)
        self.faults = FaultModel(victims, self.memory, self.schedule)
        self.policy = self._build_policy()
        self.metrics = Metrics()
        self.flips: list[FlipRecord] = []
        self.rejections: list[tuple[int, str]] = []
        self._scrubs: list[tuple[int, int, int]] = []
        self._scrub_pending: set[tuple[int, int]] = set()
        self._next_round = 0
        self._manual_rounds = 0

    def _build_policy(self) -> MitigationPolicy:
        m = self.config.mitigation
        if m.kind == "para":
            cfg = ParaConfig(m.p, m.both_sides, derive_seed(self.config.seed, "para"))
            return ParaPolicy(cfg, self.neighbors)
        if m.kind == "counter":
            threshold = m.threshold if m.threshold is not None else self.config.profile.threshold_min - 1
            return CounterPolicy(CounterTable(threshold, m.capacity), self.neighbors)
        if m.kind == "dynamic_remap":
            return DynamicRemapPolicy()
        return MitigationPolicy()

    def neighbors(self, addr: RowAddress):
        return adjacency(self.adj, addr)

    def run(self, items: Iterable[TraceItem]) -> tuple[Metrics, list[FlipRecord]]:
        for item in items:
            self.feed(item)
        return self.finish()

    def feed(self, item: TraceItem) -> None:
        """Process one command or burst; :meth:`finish` closes the run."""
        if isinstance(item, Burst):
            self._burst(item)
        else:
            self._command(item)

    # -- per-command path -------------------------------------------------

    def _command(self, cmd: Command) -> bool:
        self._advance(cmd.time_ns)
        try:
            if cmd.kind is Kind.REF and self.schedule.enabled:
                raise ProtocolViolation("REF in trace while the controller schedules refresh (timing.auto_refresh)")
            events = apply_command(self.state, self.geom, self.timing, cmd)
        except CommandRejected as exc:
            self.metrics.protocol_violations += 1
            if len(self.rejections) < 100:
                self.rejections.append((cmd.line, f"{type(exc).__name__}: {exc}"))
                where = f"line {cmd.line}" if cmd.line else f"t={cmd.time_ns}"
                log.warning("dropped command at %s: %s: %s", where, type(exc).__name__, exc)
            return False
        self.metrics.commands += 1
        for ev in events:
            self._dispatch(ev)
        return True

    def _dispatch(self, ev) -> None:
        m = self.metrics
        if isinstance(ev, RowOpened):
            p = self.adj.physical(ev.bank, ev.row)
            m.total_activations += 1
            self._record(self.faults.on_activate(ev.bank, p, ev.time_ns))
            self._act(self.policy.on_row_open(RowAddress(ev.bank, ev.row), ev.time_ns), ev.time_ns)
        elif isinstance(ev, RowClosed):
            self._act(self.policy.on_row_close(RowAddress(ev.bank, ev.row), ev.time_ns), ev.time_ns)
        elif isinstance(ev, WordRead):
            if self.config.ecc.enabled:
                self._ecc_check(ev.bank, self.adj.physical(ev.bank, ev.row), ev.col, ev.time_ns)
        elif isinstance(ev, WordWritten):
            p = self.adj.physical(ev.bank, ev.row)
            self.memory.write(ev.bank, p, ev.col, ev.data)
            self.faults.clear_word(ev.bank, p, ev.col)
        elif isinstance(ev, RefreshRoundDone):
            self._manual_rounds += 1
            for addr in ev.rows:
                self._refresh_row(addr.bank, addr.row, ev.time_ns)
            self._act(self.policy.on_refresh_round(ev.time_ns), ev.time_ns)

    def _refresh_row(self, bank: int, prow: int, t: int) -> None:
        self.faults.on_refresh(bank, prow, t)
        if self.config.ecc.enabled and self.config.ecc.scrub_on_refresh:
            for word in self.memory.erroneous_words(bank, prow):
                self._ecc_check(bank, prow, word, t)

    def _act(self, actions, t: int) -> None:
        for a in actions:
            if isinstance(a, NeighborRefresh):
                self.faults.restore(a.bank, self.adj.physical(a.bank, a.row), t)
                self.metrics.mitigation_extra_activations += 1
                self.metrics.total_activations += 1
            elif isinstance(a, RemapRow):
                old, new = self.remap.remap(a.bank, a.row)
                self.memory.copy_row(a.bank, old, new)
                self.faults.rewrite_row(a.bank, new, t)
                self.metrics.remaps += 1
            else:
                raise TypeError(f"unknown mitigation action {a!r}")

    def _record(self, flips: list[FlipRecord]) -> None:
        if not flips:
            return
        m = self.metrics
        scrub = self.config.ecc.enabled and self.config.ecc.scrub_on_refresh and self.schedule.enabled
        for f in flips:
            self.flips.append(f)
            m.flips_total += 1
            m.flips_by_row[(f.bank, f.row)] += 1
            if m.first_flip_time_ns is None:
                m.first_flip_time_ns = f.time_ns
            if self.remap is None or self.remap.in_service(f.bank, f.row):
                m.flips_in_service += 1
            if scrub and (f.bank, f.row) not in self._scrub_pending:
                self._scrub_pending.add((f.bank, f.row))
                heapq.heappush(self._scrubs, (self.schedule.next_refresh_after(f.row, f.time_ns), f.bank, f.row))

    def _ecc_check(self, bank: int, prow: int, col: int, t: int) -> None:
        cls = classify_word(self.memory.error_mask(bank, prow, col).bit_count())
        if cls is EccClass.CLEAN:
            return
        m = self.metrics
        if cls is EccClass.CORRECTED:
            self.memory.repair(bank, prow, col)
            self.faults.clear_word(bank, prow, col)
            m.ecc_corrections += 1
        elif cls is EccClass.DETECTED_UNCORRECTABLE:
            m.ecc_detections += 1
        else:
            m.ecc_miscorrections += 1
            return
        addr = RowAddress(bank, self.adj.logical(bank, prow))
        self._act(self.policy.on_flip_detected(addr, col, cls, t), t)

    def _advance(self, t: int) -> None:
        """Run everything scheduled at or before ``t``: ECC scrubs at row
        refresh, and refresh-round hooks for policies that want them."""
        want_rounds = self.policy.wants_refresh_rounds and self.schedule.enabled
        while True:
            ts = self._scrubs[0][0] if self._scrubs else None
            tr = self.schedule.round_time(self._next_round) if want_rounds else None
            if tr is not None and tr <= t and (ts is None or tr <= ts):
                self._next_round += 1
                self._act(self.policy.on_refresh_round(tr), tr)
            elif ts is not None and ts <= t:
                _, bank, prow = heapq.heappop(self._scrubs)
                self._scrub_pending.discard((bank, prow))
                for word in self.memory.erroneous_words(bank, prow):
                    self._ecc_check(bank, prow, word, ts)
            else:
                return

    # -- bursts -----------------------------------------------------------

    def _burst(self, b: Burst) -> None:
        fast = (
            len(b.rows) == 1
            and not self.config.ecc.enabled
            and not self.policy.wants_refresh_rounds
            and b.period_ns >= self.timing.t_rc_ns
            and 0 <= b.rd_offset <= b.pre_offset <= b.period_ns
        )
        addr = RowAddress(b.bank, b.rows[0])
        i, n = 0, b.count
        while i < n:
            ok = self._iteration(b, i)
            i += 1
            if not (fast and ok) or i >= n:
                continue
            k = min(n - i, self.policy.burst_horizon(addr))
            if k > 0:
                self._skip(b, addr, b.start_ns + i * b.period_ns, int(k))
                i += int(k)

    def _iteration(self, b: Burst, i: int) -> bool:
        t = b.start_ns + i * b.period_ns
        row = b.rows[i % len(b.rows)]
        ok = self._command(Command(t, Kind.ACT, b.bank, row, line=b.line))
        ok &= self._command(Command(t + b.rd_offset, Kind.RD, b.bank, col=b.col, line=b.line))
        ok &= self._command(Command(t + b.pre_offset, Kind.PRE, b.bank, line=b.line))
        return ok

    def _skip(self, b: Burst, addr: RowAddress, t0: int, k: int) -> None:
        period = b.period_ns
        t_last = t0 + (k - 1) * period
        p = self.adj.physical(addr.bank, addr.row)
        self._record(self.faults.hammer_run(addr.bank, p, t0, period, k))
        self.metrics.total_activations += k
        self.metrics.commands += 3 * k
        self.policy.skip(addr, k, t_last)
        bank = self.state.banks[addr.bank]
        bank.last_act_time_ns = t_last
        bank.open_row = None
        self.state.last_time_ns = t_last + b.pre_offset

    def finish(self) -> tuple[Metrics, list[FlipRecord]]:
        m = self.metrics
        end = self.state.last_time_ns
        if end is not None:
            self._advance(end)
            m.simulated_end_time_ns = end
            m.refresh_rounds = self.schedule.rounds_through(end) if self.schedule.enabled else self._manual_rounds
        ecc = self.faults.ecc_class_counts()
        m.ecc_clean = ecc["clean"]
        m.ecc_corrected = ecc["corrected"]
        m.ecc_detected_uncorrectable = ecc["detected_uncorrectable"]
        m.ecc_silent_corruption = ecc["silent_corruption"]
        return m, self.flips


def run(config: SimConfig, items: Optional[Iterable[TraceItem]] = None) -> tuple[Metrics, list[FlipRecord]]:
    """Run ``config``; reads ``config.trace_path`` unless ``items`` is given."""
    if items is None:
        if not config.trace_path:
            raise ValueError("no trace given")
        items = compress_trace(read_trace(config.trace_path))
    return Engine(config).run(items)


def write_flip_log(flips: Iterable[FlipRecord], path) -> None:
    from .faults import FLIP_LOG_HEADER

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FLIP_LOG_HEADER + "\n")
        for f in flips:
            fh.write(f.to_csv() + "\n")
