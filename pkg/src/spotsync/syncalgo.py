"""Two-way exchange arithmetic, asymmetry-correcting offset filter, and rate
synchronization with adaptive (AIMD/MIMD) polling.

Offsets handled here are whatever quantity the caller measures; the filter
is sign-agnostic.  For a client-initiated exchange, :func:`exchange_offset`
yields reference minus client, i.e. the correction the client must apply.

A :class:`SyncState` is owned by one actor and mutated in place by
:func:`spot_step` / :func:`process_measurement`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

from spotsync.timebase import (
    MAX_SKEW_PPB,
    PPB,
    US_PER_MS,
    US_PER_S,
    Skew,
    TimePoint,
    TimeSpan,
    ZERO_SKEW,
    round_div,
)


class MalformedSampleError(ValueError):
    """Exchange timestamps are inconsistent (negative RTT or reversed stamps)."""


class NonMonotonicTimeError(ValueError):
    """A high-quality update arrived at or before the last sync time."""


@dataclass(frozen=True, slots=True)
class ExchangeSample:
    """Four timestamps of one exchange: t1/t4 on the initiator's clock,
    t2/t3 on the responder's."""

    t1: TimePoint
    t2: TimePoint
    t3: TimePoint
    t4: TimePoint

    @classmethod
    def synthetic(cls, at: TimePoint, offset: TimeSpan, rtt: TimeSpan) -> ExchangeSample:
        """Timestamps whose exchange yields exactly ``offset`` and ``rtt``."""
        t2 = at + TimeSpan(rtt.ticks // 2) + offset
        return cls(at, t2, t2, at + rtt)


def exchange_rtt(s: ExchangeSample) -> TimeSpan:
    if s.t4 < s.t1 or s.t3 < s.t2:
        raise MalformedSampleError(f"timestamps out of order: {s}")
    rtt = (s.t4 - s.t1) - (s.t3 - s.t2)
    if rtt.ticks < 0:
        raise MalformedSampleError(f"negative round-trip time {rtt}")
    return rtt


def exchange_offset(s: ExchangeSample) -> TimeSpan:
    """Responder minus initiator clock, assuming symmetric one-way delays."""
    rtt = exchange_rtt(s)
    return s.t2 - (s.t1 + TimeSpan(rtt.ticks // 2))


class PollingStyle(enum.Enum):
    AIMD = "aimd"
    MIMD = "mimd"


@dataclass(frozen=True)
class PollingPolicy:
    style: PollingStyle = PollingStyle.AIMD
    min_interval: TimeSpan = TimeSpan(16 * US_PER_S)
    max_interval: TimeSpan = TimeSpan(1024 * US_PER_S)
    initial_interval: TimeSpan = TimeSpan(64 * US_PER_S)
    additive_step: TimeSpan = TimeSpan(16 * US_PER_S)
    increase_factor: Fraction = Fraction(2)
    decrease_factor: Fraction = Fraction(1, 2)

    def __post_init__(self) -> None:
        object.__setattr__(self, "style", PollingStyle(self.style))
        object.__setattr__(self, "increase_factor", Fraction(self.increase_factor))
        object.__setattr__(self, "decrease_factor", Fraction(self.decrease_factor))
        if not (0 < self.min_interval.ticks <= self.max_interval.ticks):
            raise ValueError("need 0 < min_interval <= max_interval")
        if not (self.min_interval <= self.initial_interval <= self.max_interval):
            raise ValueError("initial_interval outside [min_interval, max_interval]")
        if self.additive_step.ticks <= 0:
            raise ValueError("additive_step must be positive")
        if self.increase_factor <= 1:
            raise ValueError("increase_factor must exceed 1")
        if not (0 < self.decrease_factor < 1):
            raise ValueError("decrease_factor must lie in (0, 1)")

    def clamp(self, interval: TimeSpan) -> TimeSpan:
        return max(self.min_interval, min(self.max_interval, interval))

    def increase(self, interval: TimeSpan) -> TimeSpan:
        if self.style is PollingStyle.AIMD:
            return self.clamp(interval + self.additive_step)
        return self.clamp(_scale(interval, self.increase_factor))

    def decrease(self, interval: TimeSpan) -> TimeSpan:
        return self.clamp(_scale(interval, self.decrease_factor))


def _scale(span: TimeSpan, factor: Fraction) -> TimeSpan:
    return TimeSpan(round_div(span.ticks * factor.numerator, factor.denominator))


class SampleQuality(enum.Enum):
    HIGH = "high"
    CORRECTED_FORWARD = "corrected-forward"
    CORRECTED_REVERSE = "corrected-reverse"


DEFAULT_ERROR_MARGIN = TimeSpan(10 * US_PER_MS)
DEFAULT_OBSERVATION_WINDOW = TimeSpan(300 * US_PER_S)
MIN_WINDOW_SAMPLES = 5
# skew baselines shorter than this amplify timestamp quantisation
MIN_SKEW_BASELINE = TimeSpan(US_PER_S)


@dataclass(eq=False)
class SyncState:
    """Per-client synchronization state.

    Fourteen variables: ``offset``/``last_sync_time`` hold the last
    high-quality sample that anchors the skew estimate, while
    ``last_offset``/``last_measure_time`` hold the latest corrected sample
    that anchors the next offset estimate.  ``abs_error_sum`` and
    ``num_samples`` accumulate the current observation window.
    """

    policy: PollingPolicy = field(default_factory=PollingPolicy)
    error_margin: TimeSpan = DEFAULT_ERROR_MARGIN
    observation_window: TimeSpan = DEFAULT_OBSERVATION_WINDOW
    offset: TimeSpan = TimeSpan(0)
    skew: Skew = ZERO_SKEW
    last_sync_time: TimePoint = TimePoint(0)
    min_rtt: TimeSpan | None = None
    polling_interval: TimeSpan | None = None
    abs_error_sum: int = 0
    num_samples: int = 0
    observation_start: TimePoint = TimePoint(0)
    last_offset: TimeSpan = TimeSpan(0)
    last_measure_time: TimePoint = TimePoint(0)
    initialized: bool = False

    def __post_init__(self) -> None:
        if self.error_margin.ticks <= 0:
            raise ValueError("error margin must be positive")
        if self.polling_interval is None:
            self.polling_interval = self.policy.initial_interval

    @property
    def mean_abs_error(self) -> TimeSpan:
        if not self.num_samples:
            return TimeSpan(0)
        return TimeSpan(self.abs_error_sum // self.num_samples)


@dataclass(frozen=True, slots=True)
class SyncUpdate:
    corrected_offset: TimeSpan
    estimated_offset: TimeSpan
    measured_offset: TimeSpan
    skew: Skew
    next_poll_in: TimeSpan
    sample_quality: SampleQuality


class FilterResult(NamedTuple):
    corrected: TimeSpan
    quality: SampleQuality


def estimate_offset(state: SyncState, now: TimePoint) -> TimeSpan:
    """Last corrected offset carried forward at the current skew."""
    return state.last_offset + state.skew.drift_over(now - state.last_measure_time)


def filter_offset(
    state: SyncState, measured_offset: TimeSpan, measured_rtt: TimeSpan, now: TimePoint
) -> FilterResult:
    """Correct ``measured_offset`` for path asymmetry and record ``measured_rtt``.

    The excess of this sample's RTT over the minimum seen so far is taken as
    the asymmetric delay.  A measurement more than one error margin above the
    estimate is blamed on the forward path and pulled down by half that delay;
    one more than a margin below is blamed on the reverse path and pushed up.
    The quality is HIGH whenever no correction was applied.
    """
    if not state.initialized:
        raise RuntimeError("filter_offset needs a bootstrapped state; use process_measurement")
    if measured_rtt.ticks < 0:
        raise MalformedSampleError("negative round-trip time")
    estimated = estimate_offset(state, now)
    # an RTT below the running minimum carries no asymmetry evidence
    half_delay = TimeSpan(max(0, measured_rtt.ticks - state.min_rtt.ticks) // 2)
    if measured_offset > estimated + state.error_margin:
        corrected = measured_offset - half_delay
    elif measured_offset < estimated - state.error_margin:
        corrected = measured_offset + half_delay
    else:
        corrected = measured_offset
    if measured_rtt < state.min_rtt:
        state.min_rtt = measured_rtt

    if corrected == measured_offset:
        quality = SampleQuality.HIGH
    elif corrected < measured_offset:
        quality = SampleQuality.CORRECTED_FORWARD
    else:
        quality = SampleQuality.CORRECTED_REVERSE
    return FilterResult(corrected, quality)


def rate_sync_step(
    state: SyncState,
    corrected: TimeSpan,
    estimated: TimeSpan,
    quality: SampleQuality,
    now: TimePoint,
    measured: TimeSpan | None = None,
) -> SyncUpdate:
    """Adapt the polling interval and, on high-quality samples, the skew."""
    if quality is SampleQuality.HIGH and now <= state.last_sync_time:
        raise NonMonotonicTimeError(f"update at {now} does not follow last sync at {state.last_sync_time}")

    in_window = (now - state.observation_start) < state.observation_window
    if in_window or state.num_samples < MIN_WINDOW_SAMPLES:
        state.abs_error_sum += abs(estimated.ticks - corrected.ticks)
        state.num_samples += 1
    else:
        stable = state.mean_abs_error.ticks < 2 * state.error_margin.ticks
        policy = state.policy
        state.polling_interval = (
            policy.increase(state.polling_interval) if stable else policy.decrease(state.polling_interval)
        )
        state.observation_start = now
        state.abs_error_sum = 0
        state.num_samples = 0

    if quality is SampleQuality.HIGH:
        baseline = now - state.last_sync_time
        if baseline >= MIN_SKEW_BASELINE:
            ppb = round_div((corrected - state.offset).ticks * PPB, baseline.ticks)
            if abs(ppb) < MAX_SKEW_PPB:
                state.skew = Skew(ppb)
        state.offset = corrected
        state.last_sync_time = now

    state.last_offset = corrected
    state.last_measure_time = now
    return SyncUpdate(
        corrected_offset=corrected,
        estimated_offset=estimated,
        measured_offset=corrected if measured is None else measured,
        skew=state.skew,
        next_poll_in=state.polling_interval,
        sample_quality=quality,
    )


def bootstrap(state: SyncState, burst: Sequence[tuple[TimeSpan, TimeSpan, TimePoint]]) -> SyncUpdate:
    """Seed a fresh state from a burst of (offset, rtt, time) measurements.

    The lowest-RTT measurement (earliest on ties) is adopted unfiltered and
    the burst minimum becomes ``min_rtt``.  A one-element burst adopts the
    first measurement as is.
    """
    if state.initialized:
        raise RuntimeError("state is already bootstrapped")
    if not burst:
        raise ValueError("empty bootstrap burst")
    if any(rtt.ticks < 0 for _, rtt, _ in burst):
        raise MalformedSampleError("negative round-trip time")
    best = min(range(len(burst)), key=lambda i: (burst[i][1], i))
    measured, rtt, now = burst[best]
    state.offset = state.last_offset = measured
    state.last_sync_time = state.last_measure_time = state.observation_start = now
    state.min_rtt = rtt
    state.abs_error_sum = state.num_samples = 0
    state.initialized = True
    return SyncUpdate(measured, measured, measured, state.skew, state.polling_interval, SampleQuality.HIGH)


def process_measurement(
    state: SyncState, measured_offset: TimeSpan, measured_rtt: TimeSpan, now: TimePoint
) -> SyncUpdate:
    """Run filter and rate synchronization on one (offset, RTT) measurement.

    The first measurement is adopted unfiltered and seeds the state.
    """
    if measured_rtt.ticks < 0:
        raise MalformedSampleError("negative round-trip time")
    if not state.initialized:
        return bootstrap(state, [(measured_offset, measured_rtt, now)])
    estimated = estimate_offset(state, now)
    corrected, quality = filter_offset(state, measured_offset, measured_rtt, now)
    return rate_sync_step(state, corrected, estimated, quality, now, measured=measured_offset)


def spot_step(state: SyncState, sample: ExchangeSample, now: TimePoint | None = None) -> SyncUpdate:
    """Process one client-initiated exchange; ``now`` defaults to ``sample.t4``."""
    offset = exchange_offset(sample)
    rtt = exchange_rtt(sample)
    return process_measurement(state, offset, rtt, sample.t4 if now is None else now)
