"""Trace generators: hammering patterns and benign background traffic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from .dram import Command, Geometry, Kind, TimingParams

KINDS = ("single_sided", "double_sided", "random", "benign_stream")


class InvalidSpec(ValueError):
    pass


@dataclass
class Burst:
    """``count`` open/read/close iterations on one bank, run-length encoded.

    Iteration ``i`` activates ``rows[i % len(rows)]`` at
    ``start_ns + i * period_ns``, reads ``col`` ``rd_offset`` ns later and
    precharges ``pre_offset`` ns after the ACT.
    """

    bank: int
    rows: tuple
    count: int
    period_ns: int
    start_ns: int = 0
    col: int = 0
    rd_offset: int = 0
    pre_offset: int = 0
    line: int = field(default=0, compare=False)

    @property
    def end_ns(self) -> int:
        return self.start_ns + (self.count - 1) * self.period_ns + self.pre_offset

    def expand(self) -> Iterator[Command]:
        rows, n = self.rows, len(self.rows)
        for i in range(self.count):
            t = self.start_ns + i * self.period_ns
            yield Command(t, Kind.ACT, self.bank, rows[i % n], line=self.line)
            yield Command(t + self.rd_offset, Kind.RD, self.bank, col=self.col, line=self.line)
            yield Command(t + self.pre_offset, Kind.PRE, self.bank, line=self.line)


TraceItem = Union[Command, Burst]


def expand_trace(items: Iterable[TraceItem]) -> Iterator[Command]:
    for item in items:
        if isinstance(item, Burst):
            yield from item.expand()
        else:
            yield item


def compress_trace(commands: Iterable[Command]) -> Iterator[TraceItem]:
    """Fold runs of identical single-row ACT/RD/PRE triples into :class:`Burst`.

    Expanding the output reproduces the input exactly.  Line numbers of
    folded commands collapse onto the first line of the run.
    """
    pending: list[Command] = []
    burst: Optional[Burst] = None
    for cmd in commands:
        pending.append(cmd)
        if len(pending) < 3:
            continue
        act, rd, pre = pending
        if not (act.kind is Kind.ACT and rd.kind is Kind.RD and pre.kind is Kind.PRE
                and act.bank == rd.bank == pre.bank and act.time_ns <= rd.time_ns <= pre.time_ns
                and act.col is act.data is rd.row is rd.data is None
                and pre.row is pre.col is pre.data is None):
            if burst is not None:
                yield burst
                burst = None
            yield pending.pop(0)
            continue
        pending.clear()
        shape = (act.bank, (act.row,), rd.col, rd.time_ns - act.time_ns, pre.time_ns - act.time_ns)
        if burst is not None and (burst.bank, burst.rows, burst.col, burst.rd_offset, burst.pre_offset) == shape:
            if burst.count == 1 and act.time_ns > burst.start_ns and act.time_ns >= burst.end_ns:
                burst.period_ns = act.time_ns - burst.start_ns
                burst.count = 2
                continue
            if burst.count > 1 and act.time_ns == burst.start_ns + burst.count * burst.period_ns:
                burst.count += 1
                continue
        if burst is not None:
            yield burst
        burst = Burst(act.bank, (act.row,), 1, 0, act.time_ns, rd.col, shape[3], shape[4], line=act.line)
    if burst is not None:
        yield burst
    yield from pending


@dataclass
class PatternSpec:
    """``rows``: one aggressor for single_sided, two for double_sided, and an
    inclusive ``(lo, hi)`` range for random/benign_stream (whole bank if
    empty)."""

    kind: str
    bank: int = 0
    rows: tuple = ()
    count: int = 1
    period_ns: Optional[int] = None
    seed: int = 0
    col: int = 0
    start_ns: int = 0


def _row_range(spec: PatternSpec, geom: Optional[Geometry]) -> tuple[int, int]:
    if len(spec.rows) == 2:
        lo, hi = sorted(spec.rows)
        return lo, hi
    if len(spec.rows) == 0 and geom is not None:
        return 0, geom.rows_per_bank - 1
    raise InvalidSpec(f"{spec.kind} needs a (lo, hi) row range or a geometry")


def generate_trace(spec: PatternSpec, timing: TimingParams, geom: Optional[Geometry] = None) -> list[TraceItem]:
    """Build a trace for ``spec``; a pure function of (spec, timing, geom)."""
    if spec.kind not in KINDS:
        raise InvalidSpec(f"unknown pattern {spec.kind!r}")
    period = timing.t_rc_ns if spec.period_ns is None else spec.period_ns
    if period < timing.t_rc_ns:
        raise InvalidSpec(f"period {period} ns is shorter than tRC {timing.t_rc_ns} ns")
    if spec.count < 0:
        raise InvalidSpec("count must be >= 0")
    if geom is not None:
        if not 0 <= spec.bank < geom.banks:
            raise InvalidSpec(f"bank {spec.bank} outside geometry")
        if any(not 0 <= r < geom.rows_per_bank for r in spec.rows):
            raise InvalidSpec(f"rows {spec.rows} outside geometry")
        if not 0 <= spec.col < geom.words_per_row:
            raise InvalidSpec(f"col {spec.col} outside geometry")
    if spec.count == 0:
        return []

    if spec.kind == "single_sided":
        if len(spec.rows) != 1:
            raise InvalidSpec("single_sided takes exactly one aggressor row")
        return [Burst(spec.bank, tuple(spec.rows), spec.count, period, spec.start_ns, spec.col)]

    if spec.kind == "double_sided":
        if len(spec.rows) != 2 or abs(spec.rows[0] - spec.rows[1]) != 2:
            raise InvalidSpec("double_sided aggressors must be two rows exactly 2 apart")
        return [Burst(spec.bank, tuple(spec.rows), 2 * spec.count, period, spec.start_ns, spec.col)]

    lo, hi = _row_range(spec, geom)
    rng = np.random.default_rng(spec.seed)
    words = geom.words_per_row if geom is not None else spec.col + 1
    out: list[TraceItem] = []
    t = spec.start_ns
    if spec.kind == "random":
        rows = rng.integers(lo, hi + 1, size=spec.count).tolist()
        cols = rng.integers(0, words, size=spec.count).tolist()
        for row, col in zip(rows, cols):
            out.append(Command(t, Kind.ACT, spec.bank, row))
            out.append(Command(t, Kind.RD, spec.bank, col=col))
            out.append(Command(t, Kind.PRE, spec.bank))
            t += period
        return out

    # benign_stream: walk forward through the range, touching a short run of
    # columns in each row, reads mixed with the odd write.
    span = hi - lo + 1
    strides = rng.integers(1, 17, size=spec.count).tolist()
    burst_len = min(8, words)
    starts = rng.integers(0, max(1, words - burst_len + 1), size=spec.count).tolist()
    writes = (rng.random((spec.count, burst_len)) < 0.25).tolist()
    data = rng.integers(0, 1 << 63, size=(spec.count, burst_len), dtype=np.int64).tolist()
    pos = 0
    for i in range(spec.count):
        pos = (pos + strides[i]) % span
        out.append(Command(t, Kind.ACT, spec.bank, lo + pos))
        for c in range(burst_len):
            col = starts[i] + c
            if writes[i][c]:
                out.append(Command(t, Kind.WR, spec.bank, col=col, data=data[i][c]))
            else:
                out.append(Command(t, Kind.RD, spec.bank, col=col))
        out.append(Command(t, Kind.PRE, spec.bank))
        t += period
    return out


def hammer_every_row(geom: Geometry, timing: TimingParams, count: int,
                     period_ns: Optional[int] = None, start_ns: int = 0) -> list[Burst]:
    """Single-sided hammering of every row of every bank, one after another.

    Each row gets ``count`` back-to-back activations; this is the profiling
    and sweep workload.
    """
    period = timing.t_rc_ns if period_ns is None else period_ns
    if period < timing.t_rc_ns:
        raise InvalidSpec(f"period {period} ns is shorter than tRC {timing.t_rc_ns} ns")
    out = []
    t = start_ns
    for bank in range(geom.banks):
        for row in range(geom.rows_per_bank):
            out.append(Burst(bank, (row,), count, period, t))
            t += count * period
    return out
