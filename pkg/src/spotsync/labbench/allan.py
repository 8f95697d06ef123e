"""Non-overlapping Allan deviation of clock-offset (phase) data."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from spotsync.timebase import US_PER_S, OffsetTrace, TimeSpan


class AllanError(ValueError):
    pass


@dataclass(frozen=True)
class AllanSeries:
    taus: tuple[TimeSpan, ...]
    adevs: tuple[float, ...]
    counts: tuple[int, ...]  # second differences averaged at each tau

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise AllanError("taus must be strictly increasing")

    def __iter__(self):
        return iter(zip(self.taus, self.adevs))

    def tau_seconds(self) -> np.ndarray:
        return np.array([t.seconds for t in self.taus])

    def slope(self, tau_min: float | None = None, tau_max: float | None = None) -> float:
        """Least-squares log-log slope over taus (seconds) in [tau_min, tau_max]."""
        tau = self.tau_seconds()
        adev = np.asarray(self.adevs)
        keep = (adev > 0) & (tau >= (tau_min or 0)) & (tau <= (tau_max or np.inf))
        if keep.sum() < 2:
            raise AllanError("need two positive points to fit a slope")
        return float(np.polyfit(np.log10(tau[keep]), np.log10(adev[keep]), 1)[0])

    def intercept(self) -> TimeSpan:
        """Tau at which the deviation is smallest."""
        return self.taus[int(np.argmin(self.adevs))]


def adev_from_phase(
    phase: np.ndarray, tau0_s: float, factors: Sequence[int], scale: float = 1.0
) -> tuple[list[float], list[int]]:
    """ADEV of phase samples taken every ``tau0_s``, at tau = m * tau0.

    ``phase`` times ``scale`` is in seconds.  Integer phase is differenced
    exactly before scaling.  For each m the phase is decimated to spacing tau
    and AVAR = mean((x[k+2] - 2x[k+1] + x[k])^2) / (2 tau^2).
    """
    x = np.asarray(phase)
    adevs, counts = [], []
    for m in factors:
        if m < 1:
            raise AllanError(f"averaging factor {m} must be positive")
        xd = x[::m]
        if len(xd) < 3:
            raise AllanError(f"tau = {m} x {tau0_s} s leaves {len(xd)} phase points; need 3")
        d2 = (xd[2:] - 2 * xd[1:-1] + xd[:-2]) * scale
        tau = m * tau0_s
        adevs.append(float(np.sqrt(np.mean(d2**2) / (2 * tau * tau))))
        counts.append(len(d2))
    return adevs, counts


def allan_deviation(trace: OffsetTrace, taus: Sequence[TimeSpan]) -> AllanSeries:
    """Allan deviation of a uniformly sampled offset trace.

    Raises:
        AllanError: non-uniform sampling, a tau that is not a multiple of the
            sample period, or fewer than three phase points at some tau.
    """
    if not trace.is_uniform():
        raise AllanError("trace is not uniformly sampled")
    period = trace.sample_period.ticks
    factors = []
    for tau in taus:
        m, rem = divmod(tau.ticks, period)
        if rem or m < 1:
            raise AllanError(f"tau {tau} is not a positive multiple of the sample period")
        factors.append(m)
    adevs, counts = adev_from_phase(trace.offsets_us(), period / US_PER_S, factors, scale=1 / US_PER_S)
    return AllanSeries(tuple(taus), tuple(adevs), tuple(counts))


def octave_taus(period: TimeSpan, n_points: int, max_factor: int | None = None) -> list[TimeSpan]:
    """Taus 1, 2, 4, ... times ``period`` leaving at least three phase points."""
    limit = (n_points - 1) // 2
    if max_factor is not None:
        limit = min(limit, max_factor)
    out, m = [], 1
    while m <= limit:
        out.append(TimeSpan(m * period.ticks))
        m *= 2
    return out


def white_phase_noise(n: int, sigma_s: float, seed: int) -> np.ndarray:
    """Phase samples (s) of white phase noise."""
    return np.random.Generator(np.random.PCG64(seed)).standard_normal(n) * sigma_s


def random_walk_frequency(n: int, step_sigma: float, tau0_s: float, seed: int) -> np.ndarray:
    """Phase samples (s) whose fractional frequency is a random walk with
    per-sample increments of ``step_sigma``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    y = np.cumsum(rng.standard_normal(n) * step_sigma)
    return np.concatenate([[0.0], np.cumsum(y[:-1]) * tau0_s])
