"""Integer-microsecond time arithmetic, synthetic device clocks and offset traces.

Every clock quantity in the package is an integer count of microseconds.
Device offsets follow the usual convention: device reading minus reference
time at the same instant, so a clock running fast has a positive offset.

Trace files are CSV with a ``ref_time_ms,offset_ms`` header and decimal
milliseconds carrying at most three fractional digits.  Lines starting with
``#`` are comments; ``# device: <label>`` and ``# sample_period_ms: <ms>``
comments populate the trace metadata.
"""

from __future__ import annotations

import bisect
import enum
import math
import operator
import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Iterable, Sequence

import numpy as np

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

US_PER_MS = 1_000
US_PER_S = 1_000_000
PPB = 1_000_000_000

# |skew| must stay below 1% (10^7 ppb)
MAX_SKEW_PPB = 10_000_000


def _check_int64(value: int) -> int:
    if value < INT64_MIN or value > INT64_MAX:
        raise OverflowError(f"{value} does not fit in a signed 64-bit tick count")
    return value


def round_div(num: int, den: int) -> int:
    """Integer division rounded to nearest, halves away from zero."""
    if den == 0:
        raise ZeroDivisionError("round_div by zero")
    if den < 0:
        num, den = -num, -den
    q, r = divmod(abs(num), den)
    if 2 * r >= den:
        q += 1
    return q if num >= 0 else -q


def trunc_div(num: int, den: int) -> int:
    """Integer division rounded toward zero."""
    q = abs(num) // abs(den)
    return q if (num >= 0) == (den > 0) else -q


@dataclass(frozen=True, order=True, slots=True)
class TimeSpan:
    """Signed duration in integer microseconds."""

    ticks: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "ticks", _check_int64(operator.index(self.ticks)))

    @classmethod
    def from_ms(cls, ms: float | int | str | Decimal) -> TimeSpan:
        return cls(_decimal_to_us(ms))

    @classmethod
    def from_s(cls, s: float | int | str | Decimal) -> TimeSpan:
        return cls(_decimal_to_us(Decimal(str(s)) * 1000))

    @property
    def ms(self) -> int:
        """Whole milliseconds, rounded toward zero."""
        return trunc_div(self.ticks, US_PER_MS)

    @property
    def seconds(self) -> float:
        return self.ticks / US_PER_S

    def as_ms(self) -> float:
        return self.ticks / US_PER_MS

    def __add__(self, other: TimeSpan) -> TimeSpan:
        if isinstance(other, TimeSpan):
            return TimeSpan(self.ticks + other.ticks)
        return NotImplemented

    def __sub__(self, other: TimeSpan) -> TimeSpan:
        if isinstance(other, TimeSpan):
            return TimeSpan(self.ticks - other.ticks)
        return NotImplemented

    def __neg__(self) -> TimeSpan:
        return TimeSpan(-self.ticks)

    def __abs__(self) -> TimeSpan:
        return TimeSpan(abs(self.ticks))

    def __mul__(self, k: int) -> TimeSpan:
        return TimeSpan(self.ticks * operator.index(k))

    __rmul__ = __mul__

    def __bool__(self) -> bool:
        return self.ticks != 0

    def __str__(self) -> str:
        return f"{format_ms(self.ticks)} ms"


@dataclass(frozen=True, order=True, slots=True)
class TimePoint:
    """Instant in integer microseconds since an arbitrary epoch."""

    ticks: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "ticks", _check_int64(operator.index(self.ticks)))

    @classmethod
    def from_ms(cls, ms: float | int | str | Decimal) -> TimePoint:
        return cls(_decimal_to_us(ms))

    @classmethod
    def from_s(cls, s: float | int | str | Decimal) -> TimePoint:
        return cls(_decimal_to_us(Decimal(str(s)) * 1000))

    @property
    def seconds(self) -> float:
        return self.ticks / US_PER_S

    def __add__(self, other: TimeSpan) -> TimePoint:
        if isinstance(other, TimeSpan):
            return TimePoint(self.ticks + other.ticks)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, TimePoint):
            return TimeSpan(self.ticks - other.ticks)
        if isinstance(other, TimeSpan):
            return TimePoint(self.ticks - other.ticks)
        return NotImplemented

    def __str__(self) -> str:
        return f"@{format_ms(self.ticks)} ms"


EPOCH = TimePoint(0)


class InvalidSkewError(ValueError):
    """A rate error at or beyond 1% was supplied or estimated."""


@dataclass(frozen=True, order=True, slots=True)
class Skew:
    """Rate error in integer parts per billion."""

    ppb: int

    def __post_init__(self) -> None:
        ppb = operator.index(self.ppb)
        if abs(ppb) >= MAX_SKEW_PPB:
            raise InvalidSkewError(f"skew {ppb} ppb is outside +/-{MAX_SKEW_PPB} ppb")
        object.__setattr__(self, "ppb", ppb)

    @classmethod
    def from_ppm(cls, ppm: float) -> Skew:
        return cls(round(ppm * 1000))

    @classmethod
    def from_drift(cls, drift: TimeSpan, elapsed: TimeSpan) -> Skew:
        """Skew that accumulates ``drift`` over ``elapsed``."""
        if elapsed.ticks == 0:
            raise ZeroDivisionError("skew over a zero-length baseline")
        return cls(round_div(drift.ticks * PPB, elapsed.ticks))

    @property
    def ppm(self) -> float:
        return self.ppb / 1000

    def drift_over(self, elapsed: TimeSpan) -> TimeSpan:
        """Offset accumulated over ``elapsed`` at this rate, nearest microsecond."""
        return TimeSpan(round_div(self.ppb * elapsed.ticks, PPB))


ZERO_SKEW = Skew(0)


def format_ms(ticks: int) -> str:
    """Render microseconds as milliseconds with exactly three decimals."""
    sign = "-" if ticks < 0 else ""
    q, r = divmod(abs(ticks), US_PER_MS)
    return f"{sign}{q}.{r:03d}"


def _decimal_to_us(ms) -> int:
    try:
        d = ms if isinstance(ms, Decimal) else Decimal(str(ms).strip())
    except InvalidOperation as exc:
        raise ValueError(f"not a decimal millisecond value: {ms!r}") from exc
    if not d.is_finite():
        raise ValueError(f"non-finite millisecond value: {ms!r}")
    us = d * US_PER_MS
    if us != us.to_integral_value():
        raise ValueError(f"{ms!r} ms has sub-microsecond precision")
    return int(us)


# --------------------------------------------------------------------------
# clock models


class ClockKind(enum.Enum):
    LINEAR = "linear"
    PIECEWISE = "piecewise"
    RANDOM_WALK = "random-walk"
    TRACE = "trace"


class OutOfRangeError(ValueError):
    """A reading was requested outside the span a clock model covers."""


_WALK_CHUNK = 1 << 16


class _WalkPath:
    """Lazily extended random-walk offset path on a 1 s grid, in nanoseconds.

    Chunks are always generated in order from one generator, so the value at
    a grid point does not depend on the order in which readings are requested.
    """

    def __init__(self, seed: int, density: float) -> None:
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._density = density
        self._path = np.zeros(1)
        self._lock = threading.Lock()

    def upto(self, k: int) -> np.ndarray:
        if k < len(self._path):
            return self._path
        with self._lock:
            while k >= len(self._path):
                steps = self._rng.standard_normal(_WALK_CHUNK) * self._density
                tail = self._path[-1] + np.cumsum(steps)
                self._path = np.concatenate([self._path, tail])
        return self._path


@dataclass(frozen=True)
class ClockModel:
    """Synthetic or trace-backed device clock.

    ``wander_density`` (random-walk kind) is the standard deviation, in ppb,
    of the per-second rate deviation.  Integrated into the offset it gives a
    random walk whose increments over ``tau`` seconds have standard deviation
    ``wander_density * sqrt(tau)`` nanoseconds.  Between the 1 s grid points
    the walk is interpolated linearly.

    ``segments`` (piecewise kind) switch the skew at each start time; before
    the first segment the clock runs at ``base_skew``.
    """

    kind: ClockKind
    base_skew: Skew = ZERO_SKEW
    wander_density: float = 0.0
    segments: tuple[tuple[TimePoint, Skew], ...] = ()
    trace: tuple[tuple[TimePoint, TimeSpan], ...] = ()
    seed: int = 0
    epoch: TimePoint = EPOCH
    _walk: _WalkPath | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.base_skew, Skew):
            raise InvalidSkewError("base_skew must be a Skew")
        if self.kind is ClockKind.PIECEWISE:
            starts = [s for s, _ in self.segments]
            if not starts:
                raise ValueError("piecewise clock needs at least one segment")
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError("piecewise segment starts must be strictly increasing")
            if starts[0] < self.epoch:
                raise ValueError("piecewise segment starts before the clock epoch")
        if self.kind is ClockKind.TRACE:
            times = [t for t, _ in self.trace]
            if not times:
                raise ValueError("trace clock needs at least one record")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError("trace records must be strictly increasing in ref_time")
            object.__setattr__(self, "epoch", times[0])
        if self.kind is ClockKind.RANDOM_WALK:
            if not (self.wander_density >= 0 and math.isfinite(self.wander_density)):
                raise ValueError("wander_density must be a finite non-negative number")
            object.__setattr__(self, "_walk", _WalkPath(self.seed, float(self.wander_density)))

    # constructors ---------------------------------------------------------

    @classmethod
    def linear(cls, skew_ppb: int = 0, epoch: TimePoint = EPOCH) -> ClockModel:
        return cls(ClockKind.LINEAR, base_skew=Skew(skew_ppb), epoch=epoch)

    @classmethod
    def piecewise(
        cls,
        segments: Iterable[tuple[TimePoint, int | Skew]],
        base_skew_ppb: int = 0,
        epoch: TimePoint = EPOCH,
    ) -> ClockModel:
        segs = tuple((t, s if isinstance(s, Skew) else Skew(s)) for t, s in segments)
        return cls(ClockKind.PIECEWISE, base_skew=Skew(base_skew_ppb), segments=segs, epoch=epoch)

    @classmethod
    def random_walk(
        cls, skew_ppb: int = 0, wander_density: float = 0.0, seed: int = 0, epoch: TimePoint = EPOCH
    ) -> ClockModel:
        return cls(
            ClockKind.RANDOM_WALK,
            base_skew=Skew(skew_ppb),
            wander_density=wander_density,
            seed=seed,
            epoch=epoch,
        )

    @classmethod
    def from_trace(cls, trace: OffsetTrace | Sequence[tuple[TimePoint, TimeSpan]]) -> ClockModel:
        records = trace.records if isinstance(trace, OffsetTrace) else trace
        return cls(ClockKind.TRACE, trace=tuple(records))

    # readings -------------------------------------------------------------

    @property
    def end(self) -> TimePoint | None:
        """Last instant the model covers, or None when unbounded."""
        if self.kind is ClockKind.TRACE:
            return self.trace[-1][0]
        return None

    def offset_us(self, ref_ticks: int) -> int:
        """Device offset in microseconds at reference instant ``ref_ticks``."""
        if ref_ticks < self.epoch.ticks:
            raise OutOfRangeError(f"reading at {ref_ticks} us precedes clock epoch {self.epoch.ticks} us")
        elapsed = ref_ticks - self.epoch.ticks
        if self.kind is ClockKind.LINEAR:
            return round_div(self.base_skew.ppb * elapsed, PPB)
        if self.kind is ClockKind.PIECEWISE:
            return self._piecewise_offset(ref_ticks)
        if self.kind is ClockKind.RANDOM_WALK:
            drift = round_div(self.base_skew.ppb * elapsed, PPB)
            return drift + self._walk_offset(elapsed)
        return self._trace_offset(ref_ticks)

    def _piecewise_offset(self, ref_ticks: int) -> int:
        total = 0  # ppb * us
        cursor = self.epoch.ticks
        rate = self.base_skew.ppb
        for start, skew in self.segments:
            if start.ticks >= ref_ticks:
                break
            total += rate * (start.ticks - cursor)
            cursor, rate = start.ticks, skew.ppb
        total += rate * (ref_ticks - cursor)
        return round_div(total, PPB)

    def _walk_offset(self, elapsed: int) -> int:
        k, frac = divmod(elapsed, US_PER_S)
        path = self._walk.upto(k + 1)
        ns = path[k] + (path[k + 1] - path[k]) * (frac / US_PER_S)
        return round(ns / 1000)

    def _trace_offset(self, ref_ticks: int) -> int:
        times = [t.ticks for t, _ in self.trace]
        if ref_ticks > times[-1]:
            raise OutOfRangeError(f"reading at {ref_ticks} us is past the end of the trace")
        i = bisect.bisect_right(times, ref_ticks) - 1
        t0, off0 = self.trace[i]
        if t0.ticks == ref_ticks or i + 1 == len(times):
            return off0.ticks
        t1, off1 = self.trace[i + 1]
        return off0.ticks + round_div(
            (off1.ticks - off0.ticks) * (ref_ticks - t0.ticks), t1.ticks - t0.ticks
        )

    def offsets_array(self, ref_ticks: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`offset_us` over an int64 array of reference instants."""
        ref = np.asarray(ref_ticks, dtype=np.int64)
        if ref.size and ref.min() < self.epoch.ticks:
            raise OutOfRangeError("reading precedes clock epoch")
        elapsed = ref - self.epoch.ticks
        if self.kind is ClockKind.LINEAR:
            return _rounded_drift(self.base_skew.ppb, elapsed)
        if self.kind is ClockKind.RANDOM_WALK:
            k, frac = np.divmod(elapsed, US_PER_S)
            path = self._walk.upto(int(k.max()) + 1 if k.size else 1)
            ns = path[k] + (path[k + 1] - path[k]) * (frac / US_PER_S)
            return _rounded_drift(self.base_skew.ppb, elapsed) + np.round(ns / 1000).astype(np.int64)
        if self.kind is ClockKind.TRACE:
            times = np.array([t.ticks for t, _ in self.trace], dtype=np.int64)
            offs = np.array([o.ticks for _, o in self.trace], dtype=np.int64)
            if ref.size and ref.max() > times[-1]:
                raise OutOfRangeError("reading past the end of the trace")
            if len(times) == 1:
                return np.full(ref.shape, offs[0], dtype=np.int64)
            i = np.clip(np.searchsorted(times, ref, side="right") - 1, 0, len(times) - 2)
            num = (offs[i + 1] - offs[i]).astype(np.float64) * (ref - times[i])
            return offs[i] + np.round(num / (times[i + 1] - times[i])).astype(np.int64)
        return np.array([self.offset_us(int(t)) for t in ref], dtype=np.int64)


def _rounded_drift(ppb: int, elapsed: np.ndarray) -> np.ndarray:
    if elapsed.size and abs(ppb) * int(np.abs(elapsed).max()) < 2**62:
        num = ppb * elapsed
        q = (np.abs(num) + PPB // 2) // PPB
        return np.where(num >= 0, q, -q).astype(np.int64)
    return np.array([round_div(ppb * int(e), PPB) for e in elapsed], dtype=np.int64)


def clock_read(model: ClockModel, ref_time: TimePoint) -> TimePoint:
    """Device counter reading at reference instant ``ref_time``."""
    return TimePoint(ref_time.ticks + model.offset_us(ref_time.ticks))


def true_offset(model: ClockModel, ref_time: TimePoint) -> TimeSpan:
    """Ground-truth device offset (reading minus reference) at ``ref_time``."""
    return clock_read(model, ref_time) - ref_time


# --------------------------------------------------------------------------
# offset traces


@dataclass(frozen=True)
class OffsetTrace:
    """Ground-truth offsets sampled against reference time."""

    records: tuple[tuple[TimePoint, TimeSpan], ...]
    device: str = ""
    sample_period: TimeSpan = TimeSpan(US_PER_S)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if self.sample_period.ticks <= 0:
            raise ValueError("sample period must be positive")
        times = [t for t, _ in self.records]
        for i, (a, b) in enumerate(zip(times, times[1:]), start=1):
            if b <= a:
                raise TraceOrderError(i, f"ref_time {b} does not follow {a}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def start(self) -> TimePoint:
        return self.records[0][0]

    @property
    def end(self) -> TimePoint:
        return self.records[-1][0]

    def times_us(self) -> np.ndarray:
        return np.array([t.ticks for t, _ in self.records], dtype=np.int64)

    def offsets_us(self) -> np.ndarray:
        return np.array([o.ticks for _, o in self.records], dtype=np.int64)

    def is_uniform(self) -> bool:
        t = self.times_us()
        return bool(np.all(np.diff(t) == self.sample_period.ticks))

    @classmethod
    def from_arrays(
        cls, times_us: Sequence[int], offsets_us: Sequence[int], device: str = "", sample_period: TimeSpan | None = None
    ) -> OffsetTrace:
        records = tuple((TimePoint(int(t)), TimeSpan(int(o))) for t, o in zip(times_us, offsets_us))
        if sample_period is None:
            sample_period = _infer_period([t for t, _ in records])
        return cls(records, device=device, sample_period=sample_period)

    @classmethod
    def from_model(
        cls, model: ClockModel, start: TimePoint, duration: TimeSpan, period: TimeSpan, device: str = ""
    ) -> OffsetTrace:
        """Sample a clock model on a uniform grid (end inclusive)."""
        n = duration.ticks // period.ticks + 1
        times = start.ticks + period.ticks * np.arange(n, dtype=np.int64)
        return cls.from_arrays(times, model.offsets_array(times), device=device or model.kind.value, sample_period=period)


class TraceError(ValueError):
    """Base class for trace file problems; ``row`` is the 1-based file line."""

    def __init__(self, row: int | None, message: str) -> None:
        self.row = row
        where = f"line {row}: " if row is not None else ""
        super().__init__(where + message)


class TraceFormatError(TraceError):
    pass


class TraceOrderError(TraceError):
    pass


class EmptyTraceError(TraceError):
    pass


TRACE_HEADER = ("ref_time_ms", "offset_ms")


def _infer_period(times: Sequence[TimePoint]) -> TimeSpan:
    if len(times) < 2:
        raise ValueError("cannot infer a sample period from fewer than two records")
    diffs = Counter(b.ticks - a.ticks for a, b in zip(times, times[1:]))
    return TimeSpan(diffs.most_common(1)[0][0])


def _parse_ms(text: str, row: int, column: str) -> int:
    text = text.strip()
    if not text:
        raise TraceFormatError(row, f"empty {column}")
    try:
        d = Decimal(text)
    except InvalidOperation:
        raise TraceFormatError(row, f"{column} {text!r} is not a decimal number") from None
    if not d.is_finite() or d.as_tuple().exponent < -3:
        raise TraceFormatError(row, f"{column} {text!r} needs at most 3 fractional digits")
    return int(d * US_PER_MS)


def load_trace(path: str | os.PathLike, device: str | None = None) -> OffsetTrace:
    """Read a trace CSV.

    Raises:
        EmptyTraceError: no data rows.
        TraceFormatError: bad header, wrong column count or unparsable value.
        TraceOrderError: ref_time not strictly increasing.
    """
    meta: dict[str, str] = {}
    times: list[int] = []
    offsets: list[int] = []
    header_seen = False
    with open(path, encoding="utf-8") as fh:
        for row, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                key, sep, value = stripped[1:].partition(":")
                if sep:
                    meta[key.strip().lower()] = value.strip()
                continue
            cells = [c.strip() for c in stripped.split(",")]
            if not header_seen:
                if tuple(cells) != TRACE_HEADER:
                    raise TraceFormatError(row, f"expected header {','.join(TRACE_HEADER)}")
                header_seen = True
                continue
            if len(cells) != 2:
                raise TraceFormatError(row, f"expected 2 columns, got {len(cells)}")
            t = _parse_ms(cells[0], row, "ref_time_ms")
            off = _parse_ms(cells[1], row, "offset_ms")
            if times and t <= times[-1]:
                raise TraceOrderError(row, f"ref_time {cells[0]} ms is not after the previous row")
            times.append(t)
            offsets.append(off)
    if not times:
        raise EmptyTraceError(None, f"{os.fspath(path)} contains no trace records")
    if "sample_period_ms" in meta:
        period = TimeSpan(_parse_ms(meta["sample_period_ms"], None, "sample_period_ms"))
    elif len(times) >= 2:
        period = _infer_period([TimePoint(t) for t in times])
    else:
        raise TraceFormatError(None, "single-record trace needs a '# sample_period_ms:' comment")
    label = device or meta.get("device") or os.path.splitext(os.path.basename(path))[0]
    return OffsetTrace.from_arrays(times, offsets, device=label, sample_period=period)


def save_trace(trace: OffsetTrace, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if trace.device:
            fh.write(f"# device: {trace.device}\n")
        fh.write(f"# sample_period_ms: {format_ms(trace.sample_period.ticks)}\n")
        fh.write(",".join(TRACE_HEADER) + "\n")
        for t, off in trace.records:
            fh.write(f"{format_ms(t.ticks)},{format_ms(off.ticks)}\n")
