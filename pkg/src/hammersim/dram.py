"""DRAM geometry, timing, command protocol and refresh bookkeeping.

Rows are addressed logically by the memory controller and physically by the
array; an :class:`AdjacencyMap` translates between the two.  Everything that
touches cells (the backing store, victim cells, refresh) works on physical
rows.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, NamedTuple, Optional

ALL_ONES = (1 << 64) - 1


class CommandRejected(Exception):
    """A trace command the DRAM refuses; the engine counts and drops it."""


class ProtocolViolation(CommandRejected):
    pass


class TimingViolation(CommandRejected):
    pass


class OutOfOrderTimestamp(CommandRejected):
    pass


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class Geometry:
    banks: int = 8
    rows_per_bank: int = 32_768
    words_per_row: int = 1_024
    bits_per_word: int = 64

    def __post_init__(self):
        if self.banks < 1:
            raise ValueError("banks must be >= 1")
        if self.rows_per_bank < 2:
            raise ValueError("rows_per_bank must be >= 2")
        if self.words_per_row < 1:
            raise ValueError("words_per_row must be >= 1")
        if self.bits_per_word != 64:
            raise ValueError("bits_per_word is fixed at 64")

    @property
    def total_rows(self) -> int:
        return self.banks * self.rows_per_bank

    @property
    def total_words(self) -> int:
        return self.total_rows * self.words_per_row

    def row_id(self, bank: int, row: int) -> int:
        return bank * self.rows_per_bank + row

    def word_id(self, bank: int, row: int, word: int) -> int:
        return (bank * self.rows_per_bank + row) * self.words_per_row + word


@dataclass(frozen=True)
class TimingParams:
    """Timing constants in integer nanoseconds.

    ``t_refi_ns`` is truncated (64 ms / 8192 -> 7812 ns); the leftover
    nanoseconds are folded into the last REF interval of every window, so a
    window still spans ``retention_window_ns`` exactly.  ``refresh_scale``
    multiplies the refresh rate: rounds arrive every
    ``floor(t_refi_ns / refresh_scale)`` ns and the window shrinks to
    ``floor(retention_window_ns / refresh_scale)``.
    """

    t_rc_ns: int = 50
    retention_window_ns: int = 64_000_000
    ref_commands_per_window: int = 8_192
    refresh_scale: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "refresh_scale", Fraction(self.refresh_scale))
        if self.t_rc_ns < 1:
            raise ValueError("t_rc_ns must be positive")
        if self.ref_commands_per_window < 1:
            raise ValueError("ref_commands_per_window must be positive")
        if self.retention_window_ns < self.ref_commands_per_window:
            raise ValueError("retention window shorter than one ns per REF")
        if self.refresh_scale <= 0:
            raise ValueError("refresh_scale must be positive")
        if self.effective_refi_ns < 1:
            raise ValueError("refresh_scale too large: REF interval below 1 ns")

    @property
    def t_refi_ns(self) -> int:
        return self.retention_window_ns // self.ref_commands_per_window

    @property
    def effective_refi_ns(self) -> int:
        return int(self.t_refi_ns / self.refresh_scale)

    @property
    def effective_window_ns(self) -> int:
        return int(self.retention_window_ns / self.refresh_scale)

    @property
    def max_activations_per_window(self) -> int:
        """ACTs one bank can issue inside one (effective) refresh window."""
        return self.effective_window_ns // self.t_rc_ns


class Kind(str, enum.Enum):
    ACT = "ACT"
    PRE = "PRE"
    RD = "RD"
    WR = "WR"
    REF = "REF"


@dataclass
class Command:
    time_ns: int
    kind: Kind
    bank: Optional[int] = None
    row: Optional[int] = None
    col: Optional[int] = None
    data: Optional[int] = None
    line: int = field(default=0, compare=False)

    def to_line(self) -> str:
        k = self.kind
        if k is Kind.REF:
            return f"{self.time_ns},REF"
        if k is Kind.ACT:
            return f"{self.time_ns},ACT,{self.bank},{self.row}"
        if k is Kind.PRE:
            return f"{self.time_ns},PRE,{self.bank}"
        if k is Kind.RD:
            return f"{self.time_ns},RD,{self.bank},,{self.col}"
        return f"{self.time_ns},WR,{self.bank},,{self.col},{self.data:#x}"

    @classmethod
    def parse(cls, text: str, line: int = 0) -> "Command":
        """Parse ``time_ns,KIND,bank,row,col,data_hex``.

        Trailing fields may be omitted; fields that do not apply to a kind may
        be left empty (``100,RD,0,,7``).
        """
        parts = [p.strip() for p in text.split(",")]
        while parts and parts[-1] == "":
            parts.pop()
        if len(parts) < 2:
            raise TraceFormatError(f"expected at least time and kind: {text!r}", line)
        try:
            time_ns = int(parts[0])
        except ValueError:
            raise TraceFormatError(f"bad timestamp {parts[0]!r}", line) from None
        try:
            kind = Kind(parts[1].upper())
        except ValueError:
            raise TraceFormatError(f"unknown command {parts[1]!r}", line) from None

        def num(i: int, name: str, base: int = 10) -> Optional[int]:
            if i >= len(parts) or parts[i] == "":
                return None
            try:
                return int(parts[i], base)
            except ValueError:
                raise TraceFormatError(f"bad {name} {parts[i]!r}", line) from None

        bank, row, col, data = num(2, "bank"), num(3, "row"), num(4, "col"), num(5, "data", 16)
        required = {
            Kind.ACT: ("bank", "row"),
            Kind.PRE: ("bank",),
            Kind.RD: ("bank", "col"),
            Kind.WR: ("bank", "col", "data"),
            Kind.REF: (),
        }[kind]
        values = {"bank": bank, "row": row, "col": col, "data": data}
        for name in required:
            if values[name] is None:
                raise TraceFormatError(f"{kind.value} needs {name}", line)
        if time_ns < 0:
            raise TraceFormatError("negative timestamp", line)
        if data is not None and not 0 <= data <= ALL_ONES:
            raise TraceFormatError("data does not fit in 64 bits", line)
        return cls(time_ns, kind, bank, row, col, data, line)


def read_trace(path) -> Iterator[Command]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            yield Command.parse(text, lineno)


def write_trace(commands: Iterable[Command], path, header: str = "") -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for h in header.splitlines():
                fh.write(f"# {h}\n")
        for cmd in commands:
            fh.write(cmd.to_line())
            fh.write("\n")
            n += 1
    return n


class RowAddress(NamedTuple):
    bank: int
    row: int


class RowOpened(NamedTuple):
    bank: int
    row: int
    time_ns: int


class RowClosed(NamedTuple):
    bank: int
    row: int
    time_ns: int


class WordRead(NamedTuple):
    bank: int
    row: int
    col: int
    time_ns: int


class WordWritten(NamedTuple):
    bank: int
    row: int
    col: int
    data: int
    time_ns: int


class RefreshRoundDone(NamedTuple):
    time_ns: int
    rows: list


@dataclass
class BankState:
    open_row: Optional[int] = None
    last_act_time_ns: Optional[int] = None
    next_ref_row: int = 0


class DramState:
    """Protocol state of one rank: a :class:`BankState` per bank."""

    def __init__(self, geom: Geometry):
        self.banks = [BankState() for _ in range(geom.banks)]
        self.last_time_ns: Optional[int] = None
        self.refresh_rounds = 0


def _check_index(value: Optional[int], limit: int, name: str) -> int:
    if value is None or not 0 <= value < limit:
        raise ProtocolViolation(f"{name} {value} out of range [0, {limit})")
    return value


def apply_command(state: DramState, geom: Geometry, timing: TimingParams, cmd: Command) -> list:
    """Validate ``cmd`` against the bank state machine and apply it.

    Returns the emitted events.  Raises a :class:`CommandRejected` subclass
    and leaves ``state`` untouched if the command is illegal.
    """
    t = cmd.time_ns
    if state.last_time_ns is not None and t < state.last_time_ns:
        raise OutOfOrderTimestamp(f"t={t} precedes t={state.last_time_ns}")
    kind = cmd.kind

    if kind is Kind.REF:
        if any(b.open_row is not None for b in state.banks):
            raise ProtocolViolation("REF with an open bank")
        state.last_time_ns = t
        rows = refresh_round(state, geom, timing, t)
        return [RefreshRoundDone(t, rows)]

    b = _check_index(cmd.bank, geom.banks, "bank")
    bank = state.banks[b]
    if kind is Kind.ACT:
        row = _check_index(cmd.row, geom.rows_per_bank, "row")
        if bank.open_row is not None:
            raise ProtocolViolation(f"ACT to bank {b} with row {bank.open_row} open")
        if bank.last_act_time_ns is not None and t - bank.last_act_time_ns < timing.t_rc_ns:
            raise TimingViolation(
                f"ACT to bank {b} {t - bank.last_act_time_ns} ns after previous ACT (tRC={timing.t_rc_ns})"
            )
        bank.open_row = row
        bank.last_act_time_ns = t
        state.last_time_ns = t
        return [RowOpened(b, row, t)]

    if bank.open_row is None:
        raise ProtocolViolation(f"{kind.value} to closed bank {b}")
    row = bank.open_row
    if kind is Kind.PRE:
        bank.open_row = None
        state.last_time_ns = t
        return [RowClosed(b, row, t)]
    col = _check_index(cmd.col, geom.words_per_row, "col")
    state.last_time_ns = t
    if kind is Kind.RD:
        return [WordRead(b, row, col, t)]
    return [WordWritten(b, row, col, cmd.data, t)]


def _round_bounds(m: int, rows: int, refs: int) -> tuple[int, int]:
    # Round m covers rows [ceil(m*R/refs), ceil((m+1)*R/refs)).
    return -(-m * rows // refs), -(-(m + 1) * rows // refs)


def refresh_round(state: DramState, geom: Geometry, timing: TimingParams, time_ns: int) -> list[RowAddress]:
    """Refresh the next slice of rows in every bank, round-robin.

    Rows are spread over the REF commands of a window so each row is
    refreshed exactly once per window; with the default geometry every REF
    covers 4 rows per bank.
    """
    refs = timing.ref_commands_per_window
    rows = geom.rows_per_bank
    lo, hi = _round_bounds(state.refresh_rounds % refs, rows, refs)
    out = []
    for b, bank in enumerate(state.banks):
        start = bank.next_ref_row
        for i in range(hi - lo):
            out.append(RowAddress(b, (start + i) % rows))
        bank.next_ref_row = (start + hi - lo) % rows
    state.refresh_rounds += 1
    return out


class RefreshSchedule:
    """Closed-form view of the auto-refresh schedule.

    Round ``j`` fires at ``(j // refs) * window + (j % refs) * refi``.  Physical
    row ``r`` is refreshed in round index ``r * refs // rows`` of every window,
    in every bank, which matches :func:`refresh_round` started from a fresh
    state.  Lets the fault model treat refresh lazily instead of walking every
    round.
    """

    def __init__(self, geom: Geometry, timing: TimingParams, enabled: bool = True):
        self.enabled = enabled
        self.rows = geom.rows_per_bank
        self.refs = timing.ref_commands_per_window
        self.refi = timing.effective_refi_ns
        self.window = timing.effective_window_ns

    def round_time(self, j: int) -> int:
        return (j // self.refs) * self.window + (j % self.refs) * self.refi

    def rows_in_round(self, j: int) -> range:
        return range(*_round_bounds(j % self.refs, self.rows, self.refs))

    def _offset(self, row: int) -> int:
        return (row * self.refs // self.rows) * self.refi

    def last_refresh(self, row: int, t: int) -> Optional[int]:
        """Time of the latest refresh of ``row`` at or before ``t``."""
        if not self.enabled:
            return None
        off = self._offset(row)
        if t < off:
            return None
        return (t - off) // self.window * self.window + off

    def next_refresh_after(self, row: int, t: int) -> Optional[int]:
        if not self.enabled:
            return None
        off = self._offset(row)
        if t < off:
            return off
        return ((t - off) // self.window + 1) * self.window + off

    def refresh_times(self, row: int, lo: int, hi: int) -> Iterator[int]:
        """Refresh times of ``row`` in the half-open interval ``(lo, hi]``."""
        t = self.next_refresh_after(row, lo)
        while t is not None and t <= hi:
            yield t
            t += self.window

    def rounds_through(self, t: int) -> int:
        """Number of rounds fired at or before ``t``."""
        if not self.enabled or t < 0:
            return 0
        w, r = divmod(t, self.window)
        return w * self.refs + min(self.refs, r // self.refi + 1)


class AdjacencyMap:
    """Per-bank bijection logical row -> physical row (identity by default)."""

    def __init__(self, geom: Geometry):
        self.geom = geom
        self._fwd: list[Optional[list[int]]] = [None] * geom.banks
        self._inv: list[Optional[list[int]]] = [None] * geom.banks

    @classmethod
    def identity(cls, geom: Geometry) -> "AdjacencyMap":
        return cls(geom)

    @classmethod
    def from_pairs(cls, geom: Geometry, pairs: Iterable[tuple[int, int, int]]) -> "AdjacencyMap":
        """Build from ``(bank, logical, physical)`` overrides on top of identity."""
        amap = cls(geom)
        touched = set()
        for bank, logical, physical in pairs:
            _check_index(bank, geom.banks, "bank")
            _check_index(logical, geom.rows_per_bank, "row")
            _check_index(physical, geom.rows_per_bank, "row")
            amap._materialize(bank)
            amap._fwd[bank][logical] = physical
            touched.add(bank)
        for bank in touched:
            fwd = amap._fwd[bank]
            if len(set(fwd)) != len(fwd):
                raise ValueError(f"adjacency map for bank {bank} is not a bijection")
            inv = [0] * len(fwd)
            for lg, ph in enumerate(fwd):
                inv[ph] = lg
            amap._inv[bank] = inv
        return amap

    @classmethod
    def load(cls, path, geom: Geometry) -> "AdjacencyMap":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                text = raw.strip()
                if not text or text.startswith("#"):
                    continue
                try:
                    b, lg, ph = (int(x) for x in text.split(","))
                except ValueError:
                    raise TraceFormatError(f"expected bank,logical,physical: {text!r}", lineno) from None
                pairs.append((b, lg, ph))
        return cls.from_pairs(geom, pairs)

    def _materialize(self, bank: int) -> None:
        if self._fwd[bank] is None:
            n = self.geom.rows_per_bank
            self._fwd[bank] = list(range(n))
            self._inv[bank] = list(range(n))

    def copy(self) -> "AdjacencyMap":
        other = AdjacencyMap(self.geom)
        other._fwd = [None if f is None else list(f) for f in self._fwd]
        other._inv = [None if f is None else list(f) for f in self._inv]
        return other

    def physical(self, bank: int, row: int) -> int:
        fwd = self._fwd[bank]
        return row if fwd is None else fwd[row]

    def logical(self, bank: int, prow: int) -> int:
        inv = self._inv[bank]
        return prow if inv is None else inv[prow]

    def assign(self, bank: int, logical: int, physical: int) -> int:
        """Point ``logical`` at ``physical``; the logical row that held
        ``physical`` takes over the old physical row.  Returns the old
        physical row of ``logical``."""
        self._materialize(bank)
        fwd, inv = self._fwd[bank], self._inv[bank]
        old = fwd[logical]
        other = inv[physical]
        fwd[logical], fwd[other] = physical, old
        inv[physical], inv[old] = logical, other
        return old

    def overrides(self) -> list[tuple[int, int, int]]:
        out = []
        for bank, fwd in enumerate(self._fwd):
            if fwd is not None:
                out.extend((bank, lg, ph) for lg, ph in enumerate(fwd) if lg != ph)
        return out


def adjacency(amap: AdjacencyMap, addr: RowAddress) -> tuple[Optional[RowAddress], Optional[RowAddress]]:
    """Logical addresses of the rows physically next to ``addr``."""
    bank = addr.bank
    p = amap.physical(bank, addr.row)
    n = amap.geom.rows_per_bank
    left = RowAddress(bank, amap.logical(bank, p - 1)) if p > 0 else None
    right = RowAddress(bank, amap.logical(bank, p + 1)) if p + 1 < n else None
    return left, right


class Memory:
    """Sparse backing store keyed by physical word.

    Each word keeps the last written value plus a mask of bits currently
    inverted by disturbance; reads return their XOR.
    """

    def __init__(self, geom: Geometry, fill: int = ALL_ONES):
        self.geom = geom
        self.fill = fill
        self._data: dict[int, int] = {}
        self._err: dict[int, int] = {}

    def read(self, bank: int, prow: int, col: int) -> int:
        wid = self.geom.word_id(bank, prow, col)
        return self._data.get(wid, self.fill) ^ self._err.get(wid, 0)

    def write(self, bank: int, prow: int, col: int, value: int) -> None:
        wid = self.geom.word_id(bank, prow, col)
        self._data[wid] = value
        self._err.pop(wid, None)

    def invert(self, bank: int, prow: int, col: int, bit: int) -> int:
        """Flip one stored bit; returns the word's count of wrong bits."""
        wid = self.geom.word_id(bank, prow, col)
        mask = self._err.get(wid, 0) ^ (1 << bit)
        if mask:
            self._err[wid] = mask
        else:
            self._err.pop(wid, None)
        return mask.bit_count()

    def error_mask(self, bank: int, prow: int, col: int) -> int:
        return self._err.get(self.geom.word_id(bank, prow, col), 0)

    def repair(self, bank: int, prow: int, col: int) -> None:
        self._err.pop(self.geom.word_id(bank, prow, col), None)

    def erroneous_words(self, bank: int, prow: int) -> list[int]:
        base = self.geom.word_id(bank, prow, 0)
        wpr = self.geom.words_per_row
        return sorted(wid - base for wid in self._err if base <= wid < base + wpr)

    def copy_row(self, bank: int, src: int, dst: int) -> None:
        """Copy the raw contents (data and wrong bits) of one physical row."""
        wpr = self.geom.words_per_row
        sbase, dbase = self.geom.word_id(bank, src, 0), self.geom.word_id(bank, dst, 0)
        for store in (self._data, self._err):
            for wid in [w for w in store if dbase <= w < dbase + wpr]:
                del store[wid]
            for wid in [w for w in store if sbase <= w < sbase + wpr]:
                store[wid - sbase + dbase] = store[wid]

    def snapshot(self) -> dict[int, int]:
        """Current visible value of every word that differs from the fill."""
        out = {}
        for wid in self._data.keys() | self._err.keys():
            v = self._data.get(wid, self.fill) ^ self._err.get(wid, 0)
            if v != self.fill:
                out[wid] = v
        return out
