"""RowHammer disturbance model: victim cells with hammer-count thresholds.

A victim's hammer count is the number of activations of its physically
adjacent rows since its own row was last restored (activated, refreshed, or
targeted-refreshed by a mitigation).  All victims in one row share that
count, so the model keeps one counter per victim row and a min-heap of the
row's not-yet-flipped thresholds.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .dram import Geometry, Memory, RefreshSchedule, TraceFormatError

MAP_HEADER = "#victim-map v1"


class ProfileTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class VictimProfile:
    name: str
    words_with_k_victims: tuple[int, int, int, int]
    threshold_min: int = 165_000
    threshold_max: int = 1_250_000
    threshold_distribution: str = "uniform"

    def __post_init__(self):
        if len(self.words_with_k_victims) != 4 or min(self.words_with_k_victims) < 0:
            raise ValueError("words_with_k_victims needs four non-negative counts")
        if not 1 <= self.threshold_min <= self.threshold_max:
            raise ValueError("need 1 <= threshold_min <= threshold_max")
        if self.threshold_distribution not in ("uniform", "log-uniform"):
            raise ValueError(f"unknown threshold distribution {self.threshold_distribution!r}")

    @property
    def total_words(self) -> int:
        return sum(self.words_with_k_victims)

    @property
    def total_victims(self) -> int:
        return sum(k * n for k, n in enumerate(self.words_with_k_victims, 1))

    def scaled(self, divisor: int) -> "VictimProfile":
        """Counts divided by ``divisor`` and rounded down (desk-scale runs)."""
        if divisor < 1:
            raise ValueError("divisor must be >= 1")
        if divisor == 1:
            return self
        counts = tuple(n // divisor for n in self.words_with_k_victims)
        return VictimProfile(
            f"{self.name}/{divisor}",
            counts,
            self.threshold_min,
            self.threshold_max,
            self.threshold_distribution,
        )

    def with_thresholds(self, lo: int, hi: int, distribution: Optional[str] = None) -> "VictimProfile":
        return VictimProfile(
            self.name,
            self.words_with_k_victims,
            lo,
            hi,
            distribution or self.threshold_distribution,
        )


# Words with 1..4 victim cells on the most vulnerable module of each vendor.
PROFILES = {
    "A23": VictimProfile("A23", (9_709_721, 181_856, 2_248, 18)),
    "B11": VictimProfile("B11", (2_632_280, 13_638, 47, 0)),
    "C19": VictimProfile("C19", (141_821, 42, 0, 0)),
    "NULL": VictimProfile("NULL", (0, 0, 0, 0)),
}


def get_profile(name: str) -> VictimProfile:
    try:
        return PROFILES[name.upper()]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None


class VictimMap:
    """Victim cells in canonical (bank, row, word, bit) order; rows are physical."""

    def __init__(self, geom: Geometry, bank, row, word, bit, threshold):
        self.geom = geom
        arrays = [np.asarray(a, dtype=np.int64) for a in (bank, row, word, bit, threshold)]
        order = np.lexsort((arrays[3], arrays[2], arrays[1], arrays[0]))
        self.bank, self.row, self.word, self.bit, self.threshold = (a[order] for a in arrays)

    @classmethod
    def empty(cls, geom: Geometry) -> "VictimMap":
        z = np.empty(0, dtype=np.int64)
        return cls(geom, z, z, z, z, z)

    def __len__(self) -> int:
        return len(self.bank)

    def word_ids(self) -> np.ndarray:
        g = self.geom
        return (self.bank * g.rows_per_bank + self.row) * g.words_per_row + self.word

    def words_by_multiplicity(self) -> dict[int, int]:
        """{k: number of words holding exactly k victim cells}."""
        if not len(self):
            return {}
        _, counts = np.unique(self.word_ids(), return_counts=True)
        ks, ns = np.unique(counts, return_counts=True)
        return {int(k): int(n) for k, n in zip(ks, ns)}

    def rows(self) -> set[tuple[int, int]]:
        return set(zip(self.bank.tolist(), self.row.tolist()))

    def to_text(self) -> str:
        lines = [MAP_HEADER]
        cols = zip(*(a.tolist() for a in (self.bank, self.row, self.word, self.bit, self.threshold)))
        lines.extend(f"{b},{r},{w},{x},{t}" for b, r, w, x, t in cols)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path, geom: Geometry) -> "VictimMap":
        rows = []
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().strip()
            if first != MAP_HEADER:
                raise TraceFormatError(f"missing {MAP_HEADER!r} header", 1)
            for lineno, raw in enumerate(fh, 2):
                text = raw.strip()
                if not text or text.startswith("#"):
                    continue
                try:
                    b, r, w, x, t = (int(v) for v in text.split(","))
                except ValueError:
                    raise TraceFormatError(f"expected bank,row,word,bit,threshold: {text!r}", lineno) from None
                if not (0 <= b < geom.banks and 0 <= r < geom.rows_per_bank
                        and 0 <= w < geom.words_per_row and 0 <= x < 64 and t >= 1):
                    raise TraceFormatError(f"victim outside geometry: {text!r}", lineno)
                rows.append((b, r, w, x, t))
        if not rows:
            return cls.empty(geom)
        vm = cls(geom, *zip(*rows))
        cells = vm.word_ids() * 64 + vm.bit
        if len(np.unique(cells)) != len(cells):
            raise TraceFormatError("duplicate victim cell in map")
        return vm


def _sample_distinct(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """``k`` distinct integers from ``[0, n)`` in uniformly random order."""
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if n <= 4 * k or n <= 1 << 20:
        return rng.permutation(n)[:k].astype(np.int64)
    chosen = np.empty(0, dtype=np.int64)
    while chosen.size < k:
        need = k - chosen.size
        draw = rng.integers(0, n, size=need + need // 8 + 16)
        chosen = np.unique(np.concatenate([chosen, draw]))
    return chosen[rng.permutation(chosen.size)[:k]]


def _distinct_bits(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    if k == 1:
        return rng.integers(0, 64, size=(n, 1))
    parts = []
    for start in range(0, n, 1 << 16):
        m = min(1 << 16, n - start)
        parts.append(np.argsort(rng.random((m, 64)), axis=1)[:, :k])
    return np.concatenate(parts) if parts else np.empty((0, k), dtype=np.int64)


def _thresholds(rng: np.random.Generator, profile: VictimProfile, n: int) -> np.ndarray:
    lo, hi = profile.threshold_min, profile.threshold_max
    if profile.threshold_distribution == "uniform":
        return rng.integers(lo, hi + 1, size=n)
    draws = np.exp(rng.uniform(math.log(lo), math.log(hi + 1), size=n))
    return np.clip(np.floor(draws).astype(np.int64), lo, hi)


def generate_victim_map(profile: VictimProfile, geom: Geometry, seed: int) -> VictimMap:
    """Place the profile's victim words uniformly over the array.

    Each multiplicity class gets exactly its count of words, no word is shared
    between classes, bit positions are distinct within a word, and thresholds
    are i.i.d. from the profile's distribution.  Fully determined by ``seed``.
    """
    if profile.total_words > geom.total_words:
        raise ProfileTooLarge(
            f"profile {profile.name} needs {profile.total_words} words, geometry has {geom.total_words}"
        )
    rng = np.random.default_rng(seed)
    wids = _sample_distinct(rng, geom.total_words, profile.total_words)
    word_parts, bit_parts = [], []
    pos = 0
    for k, n in enumerate(profile.words_with_k_victims, 1):
        if not n:
            continue
        chunk = wids[pos:pos + n]
        pos += n
        bits = _distinct_bits(rng, n, k)
        word_parts.append(np.repeat(chunk, k))
        bit_parts.append(bits.reshape(-1))
    if not word_parts:
        return VictimMap.empty(geom)
    wid = np.concatenate(word_parts)
    bit = np.concatenate(bit_parts)
    thr = _thresholds(rng, profile, len(wid))
    row_id, word = np.divmod(wid, geom.words_per_row)
    bank, row = np.divmod(row_id, geom.rows_per_bank)
    return VictimMap(geom, bank, row, word, bit, thr)


class FlipRecord(NamedTuple):
    time_ns: int
    bank: int
    row: int  # physical
    word: int
    bit: int
    aggressor_row: int  # physical

    def to_csv(self) -> str:
        return ",".join(str(v) for v in self)


FLIP_LOG_HEADER = "time_ns,bank,row,word,bit,aggressor_row"


class _RowState:
    __slots__ = ("count", "touch", "heap")

    def __init__(self):
        self.count = 0
        self.touch = -1
        self.heap: Optional[list] = None


class FaultModel:
    """Tracks hammer counts of victim rows and injects flips into ``memory``.

    Scheduled refresh is applied lazily through ``schedule``: before a row's
    count is used, any refresh of that row since it was last touched resets
    it.  A refresh at time ``t`` precedes a command at the same ``t``.
    """

    def __init__(self, victims: VictimMap, memory: Memory, schedule: RefreshSchedule):
        geom = victims.geom
        self.geom = geom
        self.victims = victims
        self.memory = memory
        self.schedule = schedule
        self._rpb = geom.rows_per_bank
        self._wpr = geom.words_per_row
        row_ids = victims.bank * geom.rows_per_bank + victims.row
        uniq, starts = np.unique(row_ids, return_index=True)
        ends = list(starts[1:].tolist()) + [len(row_ids)]
        self._span = {int(r): (int(s), int(e)) for r, s, e in zip(uniq, starts, ends)}
        self._thr = victims.threshold
        self._word = victims.word
        self._bit = victims.bit
        self.flipped = bytearray(len(victims))
        self._rows: dict[int, _RowState] = {}
        self.word_peak: dict[int, int] = {}
        self.victim_words = int(len(np.unique(victims.word_ids()))) if len(victims) else 0

    def __len__(self) -> int:
        return len(self.victims)

    def _state(self, rid: int) -> Optional[_RowState]:
        st = self._rows.get(rid)
        if st is None:
            if rid not in self._span:
                return None
            st = self._rows[rid] = _RowState()
        return st

    def _heap(self, rid: int, st: _RowState) -> list:
        if st.heap is None:
            s, e = self._span[rid]
            thr = self._thr[s:e].tolist()
            st.heap = [(thr[i - s], i) for i in range(s, e) if not self.flipped[i]]
            heapq.heapify(st.heap)
        return st.heap

    def _sync(self, prow: int, st: _RowState, t: int) -> None:
        last = self.schedule.last_refresh(prow, t)
        if last is not None and last > st.touch:
            st.count = 0
            st.touch = last

    def _flip(self, idx: int, bank: int, prow: int, t: int, aggressor: int) -> FlipRecord:
        self.flipped[idx] = 1
        word = int(self._word[idx])
        bit = int(self._bit[idx])
        n = self.memory.invert(bank, prow, word, bit)
        wid = (bank * self._rpb + prow) * self._wpr + word
        if n > self.word_peak.get(wid, 0):
            self.word_peak[wid] = n
        return FlipRecord(t, bank, prow, word, bit, aggressor)

    def hammer_count(self, bank: int, prow: int, t: int) -> int:
        st = self._state(bank * self._rpb + prow)
        if st is None:
            return 0
        self._sync(prow, st, t)
        return st.count

    def on_activate(self, bank: int, prow: int, t: int) -> list[FlipRecord]:
        """One activation of physical row ``prow``: disturb both neighbours,
        restore the row itself."""
        out = []
        base = bank * self._rpb
        for q in (prow - 1, prow + 1):
            if not 0 <= q < self._rpb:
                continue
            rid = base + q
            st = self._state(rid)
            if st is None:
                continue
            self._sync(q, st, t)
            st.count += 1
            st.touch = t
            heap = self._heap(rid, st)
            while heap and heap[0][0] <= st.count:
                _, idx = heapq.heappop(heap)
                out.append(self._flip(idx, bank, q, t, prow))
        self.restore(bank, prow, t)
        return out

    def restore(self, bank: int, prow: int, t: int) -> None:
        """Row ``prow`` was opened or refreshed: its victims' counts reset.
        Flipped cells stay flipped."""
        st = self._state(bank * self._rpb + prow)
        if st is not None:
            st.count = 0
            st.touch = t

    on_refresh = restore

    def hammer_run(self, bank: int, prow: int, t0: int, period: int, k: int) -> list[FlipRecord]:
        """``k`` activations of ``prow`` at ``t0, t0+period, ...`` in one step.

        Equivalent to ``k`` calls of :meth:`on_activate` with nothing else
        touching the neighbours in between (scheduled refresh included).
        """
        if k <= 0:
            return []
        t_last = t0 + (k - 1) * period
        found = []
        base = bank * self._rpb
        for side, q in enumerate((prow - 1, prow + 1)):
            if not 0 <= q < self._rpb:
                continue
            rid = base + q
            st = self._state(rid)
            if st is None:
                continue
            self._sync(q, st, t0)
            heap = self._heap(rid, st)
            seg_start, count = 0, st.count
            bounds = [-(-(T - t0) // period) for T in self.schedule.refresh_times(q, t0, t_last)]
            bounds.append(k)
            for j_end in bounds:
                n = j_end - seg_start
                top = count + n
                while n and heap and heap[0][0] <= top:
                    thr, idx = heapq.heappop(heap)
                    j = seg_start + max(thr - count, 1) - 1
                    found.append((t0 + j * period, side, thr, idx, q))
                if j_end < k:
                    seg_start, count = j_end, 0
                else:
                    count = top
            st.count = count
            st.touch = t_last
        self.restore(bank, prow, t_last)
        found.sort()
        return [self._flip(idx, bank, q, t, prow) for t, _, _, idx, q in found]

    def clear_word(self, bank: int, prow: int, word: int) -> None:
        """Correct data was restored to ``word``: its victims can flip again."""
        rid = bank * self._rpb + prow
        span = self._span.get(rid)
        if span is None:
            return
        s, e = span
        words = self._word[s:e]
        lo = s + int(np.searchsorted(words, word, "left"))
        hi = s + int(np.searchsorted(words, word, "right"))
        st = self._rows.get(rid)
        for idx in range(lo, hi):
            if self.flipped[idx]:
                self.flipped[idx] = 0
                if st is not None and st.heap is not None:
                    heapq.heappush(st.heap, (int(self._thr[idx]), idx))

    def rewrite_row(self, bank: int, prow: int, t: int) -> None:
        """Row ``prow`` was overwritten wholesale (a remap copy): victims
        re-arm unless their cell still holds a wrong bit."""
        rid = bank * self._rpb + prow
        span = self._span.get(rid)
        if span is not None:
            for idx in range(*span):
                mask = self.memory.error_mask(bank, prow, int(self._word[idx]))
                self.flipped[idx] = (mask >> int(self._bit[idx])) & 1
            st = self._rows.get(rid)
            if st is not None:
                st.heap = None
        self.restore(bank, prow, t)

    def flipped_count(self) -> int:
        return sum(self.flipped)

    def ecc_class_counts(self) -> dict[str, int]:
        """Victim words classified by the most wrong bits they held at once."""
        peaks = self.word_peak.values()
        corrected = sum(1 for p in peaks if p == 1)
        detected = sum(1 for p in peaks if p == 2)
        silent = sum(1 for p in peaks if p >= 3)
        return {
            "clean": self.victim_words - corrected - detected - silent,
            "corrected": corrected,
            "detected_uncorrectable": detected,
            "silent_corruption": silent,
        }
