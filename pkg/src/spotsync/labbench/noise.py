"""Observational-noise injection over a ground-truth offset source."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from spotsync.timebase import (
    US_PER_MS,
    ClockModel,
    OffsetTrace,
    OutOfRangeError,
    TimeSpan,
)

Source = Union[ClockModel, OffsetTrace]

NOISE_PRESETS: dict[str, TimeSpan] = {
    "low": TimeSpan(50 * US_PER_MS),
    "medium": TimeSpan(150 * US_PER_MS),
    "high": TimeSpan(250 * US_PER_MS),
}
DEFAULT_PATH_RTT = TimeSpan(300 * US_PER_MS)
DEFAULT_INJECT_PROB = 0.5


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian offset noise applied with probability ``inject_prob``.

    A noisy measurement's RTT is the path RTT plus twice the absolute noise.
    """

    std_dev: TimeSpan
    inject_prob: float = DEFAULT_INJECT_PROB
    path_rtt: TimeSpan = DEFAULT_PATH_RTT
    seed: int = 0

    def __post_init__(self) -> None:
        if self.std_dev.ticks < 0:
            raise ValueError("noise std_dev must be non-negative")
        if not 0.0 <= self.inject_prob <= 1.0:
            raise ValueError("inject_prob must lie in [0, 1]")
        if self.path_rtt.ticks <= 0:
            raise ValueError("path_rtt must be positive")

    @classmethod
    def preset(cls, level: str, seed: int = 0, **kw) -> NoiseModel:
        return cls(NOISE_PRESETS[level], seed=seed, **kw)


@dataclass(frozen=True, eq=False)
class MeasurementStream:
    """Per-query measurements as parallel int64 microsecond arrays."""

    times: np.ndarray
    measured: np.ndarray
    rtt: np.ndarray
    true: np.ndarray
    noisy: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    def index_at(self, t_us: int) -> int:
        """Index of the latest query at or before ``t_us``."""
        if t_us < self.times[0] or t_us > self.times[-1]:
            raise OutOfRangeError(f"time {t_us} us outside the stream")
        return int(np.searchsorted(self.times, t_us, side="right")) - 1

    def noise_us(self) -> np.ndarray:
        return self.measured - self.true


def truth_at(source: Source, times_us: np.ndarray) -> np.ndarray:
    """Ground-truth device offsets (us) at the given reference instants."""
    if isinstance(source, OffsetTrace):
        source = ClockModel.from_trace(source)
    return source.offsets_array(times_us)


def noise_draws(seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal draws and injection uniforms, in that generation order."""
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal(n)
    u = rng.random(n)
    return z, u


def apply_noise(
    times: np.ndarray, true: np.ndarray, noise: NoiseModel, z: np.ndarray, u: np.ndarray
) -> MeasurementStream:
    n_us = np.round(z * noise.std_dev.ticks).astype(np.int64)
    noisy = u < noise.inject_prob
    injected = np.where(noisy, n_us, 0)
    return MeasurementStream(
        times=np.asarray(times, dtype=np.int64),
        measured=true + injected,
        rtt=noise.path_rtt.ticks + 2 * np.abs(injected),
        true=np.asarray(true, dtype=np.int64),
        noisy=noisy,
    )


def synthesize_measurements(
    source: Source, noise: NoiseModel, query_times: Sequence[int] | np.ndarray
) -> MeasurementStream:
    """Noisy offset/RTT measurements of ``source`` at ``query_times`` (us).

    Raises:
        ValueError: query times not strictly increasing.
        OutOfRangeError: a query falls outside the source's range.
    """
    times = np.asarray(query_times, dtype=np.int64)
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ValueError("query times must be strictly increasing")
    true = truth_at(source, times)
    z, u = noise_draws(noise.seed, len(times))
    return apply_noise(times, true, noise, z, u)
