"""RowHammer countermeasures and the SECDED classifier.

Policies see the engine's row events and answer with actions: a
:class:`NeighborRefresh` restores one row (one extra activation, no
disturbance of its own neighbours), a :class:`RemapRow` retires a row into
the spare pool.  All addresses handed to or returned by a policy are logical.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np

from .dram import AdjacencyMap, Geometry, RowAddress, TimingParams

Neighbors = Callable[[RowAddress], tuple[Optional[RowAddress], Optional[RowAddress]]]


class NeighborRefresh(NamedTuple):
    bank: int
    row: int


class RemapRow(NamedTuple):
    bank: int
    row: int


class ReservePoolExhausted(RuntimeError):
    pass


class EccClass(enum.Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    DETECTED_UNCORRECTABLE = "detected_uncorrectable"
    SILENT_CORRUPTION = "silent_corruption"


def classify_word(flip_count: int) -> EccClass:
    """SECDED outcome for a 64-bit word with ``flip_count`` wrong bits.

    Three or more errors are assumed to be miscorrected silently.
    """
    if flip_count < 0:
        raise ValueError("flip_count must be >= 0")
    if flip_count == 0:
        return EccClass.CLEAN
    if flip_count == 1:
        return EccClass.CORRECTED
    if flip_count == 2:
        return EccClass.DETECTED_UNCORRECTABLE
    return EccClass.SILENT_CORRUPTION


class MitigationPolicy:
    """No-op policy; subclasses override the hooks they need.

    ``burst_horizon``/``skip`` let the engine fast-forward a run of identical
    ACT/RD/PRE iterations: the horizon is how many further iterations of
    ``addr`` are guaranteed to produce no action, and ``skip`` advances the
    policy's state as if they had been processed one by one.
    """

    kind = "none"
    wants_refresh_rounds = False

    def on_row_open(self, addr: RowAddress, time_ns: int) -> Iterable:
        return ()

    def on_row_close(self, addr: RowAddress, time_ns: int) -> Iterable:
        return ()

    def on_refresh_round(self, time_ns: int) -> Iterable:
        return ()

    def on_flip_detected(self, addr: RowAddress, word: int, ecc: EccClass, time_ns: int) -> Iterable:
        return ()

    def burst_horizon(self, addr: RowAddress) -> float:
        return math.inf

    def skip(self, addr: RowAddress, k: int, time_ns: int) -> None:
        pass


@dataclass(frozen=True)
class ParaConfig:
    p: float
    both_sides: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"PARA probability {self.p} outside [0, 1]")


class ParaPolicy(MitigationPolicy):
    """Probabilistic adjacent row activation.

    On every row close, with probability ``p``, refresh one neighbour chosen
    uniformly (each side ``p/2``), or both neighbours with ``both_sides``.
    The Bernoulli trials are drawn as geometric gaps between firings, which
    is the same process but lets long bursts be skipped in O(1).
    """

    kind = "para"
    _BLOCK = 4096

    def __init__(self, cfg: ParaConfig, neighbors: Neighbors):
        self.cfg = cfg
        self.neighbors = neighbors
        self._rng = np.random.default_rng(cfg.rng_seed)
        self._gaps: list = []
        self._sides: list = []
        self._gap = self._next_gap()

    def _next_gap(self):
        if self.cfg.p == 0.0:
            return math.inf
        if not self._gaps:
            self._gaps = self._rng.geometric(self.cfg.p, self._BLOCK).tolist()[::-1]
        return self._gaps.pop()

    def _next_side(self) -> int:
        if not self._sides:
            self._sides = (self._rng.random(self._BLOCK) < 0.5).astype(int).tolist()[::-1]
        return self._sides.pop()

    def on_row_close(self, addr, time_ns):
        self._gap -= 1
        if self._gap > 0:
            return ()
        self._gap = self._next_gap()
        left, right = self.neighbors(addr)
        if self.cfg.both_sides:
            return [NeighborRefresh(*n) for n in (left, right) if n is not None]
        side = self._next_side()
        if left is None or right is None:
            pick = left if right is None else right
        else:
            pick = right if side else left
        return [NeighborRefresh(*pick)] if pick is not None else []

    def burst_horizon(self, addr):
        return self._gap - 1

    def skip(self, addr, k, time_ns):
        self._gap -= k


def para_failure_probability(p: float, n: int, both_sides: bool = False) -> float:
    """Probability that a given neighbour of a row closed ``n`` times is never
    refreshed: ``(1 - p/2)**n``, or ``(1 - p)**n`` with ``both_sides``."""
    return math.exp(_log_failure(p, n, both_sides))


def para_log10_failure_probability(p: float, n: int, both_sides: bool = False) -> float:
    return _log_failure(p, n, both_sides) / math.log(10)


def _log_failure(p: float, n: int, both_sides: bool) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return 0.0
    q = p if both_sides else p / 2
    if q >= 1.0:
        return -math.inf
    return n * math.log1p(-q)


class CounterTable:
    """Per-row disturbance counters in the memory controller.

    Every activation bumps the counters of the opened row's two physical
    neighbours and clears the opened row's own counter (it was just
    restored).  A counter reaching ``threshold`` asks for that row to be
    refreshed and starts over.  With ``capacity`` set, only that many tagged
    counters are kept; inserting into a full table evicts the least recently
    touched tag and its count is lost.
    """

    def __init__(self, threshold: int, capacity: Optional[int] = None):
        if threshold < 1:
            raise ValueError("counter threshold must be >= 1")
        if capacity is not None and capacity < 1:
            raise ValueError("counter capacity must be >= 1")
        self.threshold = threshold
        self.capacity = capacity
        self._counts: dict[RowAddress, int] = {}

    @property
    def mode(self) -> str:
        return "full" if self.capacity is None else "capped"

    def __len__(self) -> int:
        return len(self._counts)

    def count(self, addr: RowAddress) -> int:
        return self._counts.get(addr, 0)

    def _bump(self, addr: RowAddress, k: int) -> bool:
        counts = self._counts
        c = counts.pop(addr, 0) + k
        if c >= self.threshold:
            return True
        if self.capacity is not None and len(counts) >= self.capacity:
            del counts[next(iter(counts))]
        counts[addr] = c
        return False

    def on_row_open(self, addr: RowAddress, neighbors: Iterable[Optional[RowAddress]]) -> list[RowAddress]:
        self._counts.pop(addr, None)
        return [n for n in neighbors if n is not None and self._bump(n, 1)]


class CounterPolicy(MitigationPolicy):
    kind = "counter"

    def __init__(self, table: CounterTable, neighbors: Neighbors):
        self.table = table
        self.neighbors = neighbors

    def on_row_open(self, addr, time_ns):
        return [NeighborRefresh(*a) for a in self.table.on_row_open(addr, self.neighbors(addr))]

    def burst_horizon(self, addr):
        present = [n for n in self.neighbors(addr) if n is not None]
        cap = self.table.capacity
        if cap is not None and cap < len(present):
            # Neighbours evict each other every iteration; the table state
            # repeats, so only a threshold of 1 can ever fire.
            return 0 if self.table.threshold <= 1 else math.inf
        return self.table.threshold - 1 - max((self.table.count(n) for n in present), default=0)

    def skip(self, addr, k, time_ns):
        cap = self.table.capacity
        present = [n for n in self.neighbors(addr) if n is not None]
        if k <= 0 or (cap is not None and cap < len(present)):
            return
        self.table._counts.pop(addr, None)
        for n in present:
            self.table._bump(n, k)


class RemapTable:
    """Logical-to-physical overrides backed by a pool of spare rows.

    Spare rows hold no live data until a retired row is swapped onto one.
    Remapping swaps two entries of the adjacency map, so it stays a bijection.
    """

    def __init__(self, adjacency: AdjacencyMap, spares: dict[int, list[int]]):
        self.adjacency = adjacency
        self.spares = {b: list(rows) for b, rows in spares.items()}
        self._reserved = {(b, r) for b, rows in self.spares.items() for r in rows}
        self.retired: set[tuple[int, int]] = set()
        self.overrides: dict[tuple[int, int], int] = {}

    @classmethod
    def for_geometry(cls, geom: Geometry, reserve_rows: int, adjacency: Optional[AdjacencyMap] = None):
        if not 0 <= reserve_rows < geom.rows_per_bank:
            raise ValueError("reserve_rows must leave at least one row in service")
        amap = adjacency or AdjacencyMap.identity(geom)
        n = geom.rows_per_bank
        spares = {b: list(range(n - reserve_rows, n)) for b in range(geom.banks)}
        return cls(amap, spares)

    def copy(self) -> "RemapTable":
        other = RemapTable(self.adjacency.copy(), self.spares)
        other._reserved = set(self._reserved)
        other.retired = set(self.retired)
        other.overrides = dict(self.overrides)
        return other

    def in_service(self, bank: int, prow: int) -> bool:
        key = (bank, prow)
        return key not in self._reserved and key not in self.retired

    def discard_spare(self, bank: int, prow: int) -> None:
        pool = self.spares.get(bank, [])
        if prow in pool:
            pool.remove(prow)

    def remap(self, bank: int, logical: int) -> tuple[int, int]:
        """Move ``logical`` onto the next spare; returns (old, new) physical rows."""
        pool = self.spares.get(bank)
        if not pool:
            raise ReservePoolExhausted(f"no spare rows left in bank {bank}")
        new = pool.pop(0)
        old = self.adjacency.assign(bank, logical, new)
        self._reserved.discard((bank, new))
        self.retired.add((bank, old))
        self.overrides[(bank, logical)] = new
        return old, new


def remap_static(flip_report: Iterable, table: RemapTable) -> RemapTable:
    """Retire every in-service row that showed a flip during profiling.

    ``flip_report`` holds records with physical ``bank``/``row``.  Spares that
    flipped themselves are dropped from the pool.  Returns a new table; the
    input is left unchanged.
    """
    new = table.copy()
    rows = sorted({(f.bank, f.row) for f in flip_report})
    for bank, prow in rows:
        new.discard_spare(bank, prow)
    targets = [(b, r) for b, r in rows if new.in_service(b, r)]
    need: dict[int, int] = {}
    for b, _ in targets:
        need[b] = need.get(b, 0) + 1
    for b, n in need.items():
        have = len(new.spares.get(b, []))
        if n > have:
            raise ReservePoolExhausted(f"bank {b}: {n} vulnerable rows, {have} clean spares")
    for bank, prow in targets:
        new.remap(bank, new.adjacency.logical(bank, prow))
    return new


class DynamicRemapPolicy(MitigationPolicy):
    """Retire a row the first time ECC reports an error in it."""

    kind = "dynamic_remap"

    def __init__(self):
        self._done: set[RowAddress] = set()

    def on_flip_detected(self, addr, word, ecc, time_ns):
        if ecc not in (EccClass.CORRECTED, EccClass.DETECTED_UNCORRECTABLE) or addr in self._done:
            return ()
        self._done.add(addr)
        return [RemapRow(*addr)]


def increased_refresh(timing: TimingParams, scale) -> TimingParams:
    """Refresh ``scale`` times as often as nominal (7.8 -> ~8.2 ms window)."""
    s = Fraction(str(scale)) if isinstance(scale, float) else Fraction(scale)
    if s < 1:
        raise ValueError("refresh scale must be >= 1")
    return replace(timing, refresh_scale=s)
