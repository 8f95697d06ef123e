"""Comparison mechanisms: SNTP, MQTT timestamp push, Consensus burst filter
and MinRTT burst selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from statistics import median
from typing import Sequence

from spotsync.syncalgo import ExchangeSample, exchange_offset
from spotsync.timebase import US_PER_S, TimeSpan, round_div


class BaselineKind(enum.Enum):
    SNTP = "sntp"
    MQTT_PUSH = "mqtt"
    CONSENSUS = "consensus"
    MIN_RTT = "minrtt"


@dataclass(frozen=True)
class BaselineConfig:
    kind: BaselineKind
    polling_interval: TimeSpan = TimeSpan(128 * US_PER_S)
    burst_count: int = 8
    burst_spacing: TimeSpan = TimeSpan(15 * US_PER_S)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BaselineKind(self.kind))
        if self.polling_interval.ticks <= 0:
            raise ValueError("polling interval must be positive")
        if self.burst_spacing.ticks <= 0:
            raise ValueError("burst spacing must be positive")
        if self.kind is BaselineKind.CONSENSUS and self.burst_count < 3:
            raise ValueError("consensus needs a burst of at least 3 samples")
        if self.burst_count < 1:
            raise ValueError("burst_count must be at least 1")

    @property
    def uses_burst(self) -> bool:
        return self.kind in (BaselineKind.CONSENSUS, BaselineKind.MIN_RTT)


Burst = Sequence[tuple[TimeSpan, TimeSpan]]


def sntp_offset(sample: ExchangeSample) -> TimeSpan:
    """Raw two-way offset, no filtering."""
    return exchange_offset(sample)


def mqtt_push_offset(true_offset: TimeSpan, one_way_delay: TimeSpan) -> TimeSpan:
    """Offset a client adopts from a pushed timestamp delivered ``one_way_delay`` late."""
    if one_way_delay.ticks < 0:
        raise ValueError("one-way delay cannot be negative")
    return true_offset + one_way_delay


def consensus_survivors(offsets: Sequence[int]) -> list[int]:
    """Indices kept after dropping samples more than 3 MADs from the median.

    With a zero MAD every sample that differs from the median is dropped.
    """
    if not offsets:
        raise ValueError("empty burst")
    med = median(Fraction(o) for o in offsets)
    dev = [abs(Fraction(o) - med) for o in offsets]
    mad = median(dev)
    if mad == 0:
        return [i for i, d in enumerate(dev) if d == 0]
    return [i for i, d in enumerate(dev) if d <= 3 * mad]


def consensus_offset(burst: Burst) -> TimeSpan:
    """Mean offset of the burst after outlier elimination."""
    offsets = [off.ticks for off, _ in burst]
    keep = consensus_survivors(offsets)
    return TimeSpan(round_div(sum(offsets[i] for i in keep), len(keep)))


def minrtt_index(burst: Burst) -> int:
    if not burst:
        raise ValueError("empty burst")
    return min(range(len(burst)), key=lambda i: (burst[i][1], i))


def minrtt_offset(burst: Burst) -> TimeSpan:
    """Offset of the lowest-RTT sample; ties go to the earliest."""
    return burst[minrtt_index(burst)][0]
