"""Trace-driven protocol comparison, rate-error and polling analyses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from spotsync.baselines import BaselineConfig
from spotsync.labbench.noise import (
    DEFAULT_INJECT_PROB,
    DEFAULT_PATH_RTT,
    NOISE_PRESETS,
    MeasurementStream,
    NoiseModel,
    Source,
    apply_noise,
    noise_draws,
    truth_at,
)
from spotsync.labbench.protocols import PROTOCOLS, SPOT, ProtocolRun, run_protocol, run_spot
from spotsync.syncalgo import DEFAULT_ERROR_MARGIN, PollingPolicy
from spotsync.timebase import US_PER_MS, US_PER_S, OffsetTrace, TimeSpan

log = logging.getLogger(__name__)

DAY = TimeSpan(86_400 * US_PER_S)


@dataclass(frozen=True)
class ErrorStats:
    """RMSE plus min/max/std of absolute errors, in milliseconds."""

    rmse: float
    min: float
    max: float
    std: float

    @classmethod
    def of(cls, errors_us: np.ndarray) -> ErrorStats:
        e = np.abs(np.asarray(errors_us, dtype=np.float64)) / US_PER_MS
        if e.size == 0:
            return cls(math.nan, math.nan, math.nan, math.nan)
        return cls(float(np.sqrt(np.mean(e**2))), float(e.min()), float(e.max()), float(e.std()))

    @classmethod
    def mean_of(cls, stats: Sequence[ErrorStats]) -> ErrorStats:
        return cls(*(float(np.mean([getattr(s, f) for s in stats])) for f in ("rmse", "min", "max", "std")))


@dataclass(frozen=True)
class NoiseLevel:
    label: str
    std_dev: TimeSpan

    @classmethod
    def parse(cls, text: str) -> NoiseLevel:
        """``low``/``medium``/``high`` or ``sigma=MS`` (also ``σ=MS``)."""
        key = text.strip().lower()
        if key in NOISE_PRESETS:
            return cls(key, NOISE_PRESETS[key])
        for prefix in ("sigma=", "σ=", "s="):
            if key.startswith(prefix):
                ms = key[len(prefix):]
                return cls(f"sigma={ms}", TimeSpan.from_ms(ms))
        raise ValueError(f"unknown noise level {text!r}")


@dataclass
class ProtocolReport:
    protocol: str
    level: NoiseLevel
    stats: ErrorStats
    raw: ErrorStats
    runs_averaged: int
    rate_rmse: float | None = None
    poll_count: float | None = None


@dataclass
class ExperimentReport:
    rows: list[ProtocolReport] = field(default_factory=list)

    def get(self, protocol: str, level: str) -> ProtocolReport:
        for r in self.rows:
            if r.protocol == protocol and r.level.label == level:
                return r
        raise KeyError((protocol, level))


@dataclass(frozen=True)
class BenchConfig:
    """Knobs for :func:`run_comparison`; defaults follow the reference setup."""

    duration: TimeSpan = DAY
    step: TimeSpan = TimeSpan(US_PER_S)
    inject_prob: float = DEFAULT_INJECT_PROB
    path_rtt: TimeSpan = DEFAULT_PATH_RTT
    error_margin: TimeSpan = DEFAULT_ERROR_MARGIN
    policy: PollingPolicy = field(default_factory=PollingPolicy)
    baselines: dict[str, BaselineConfig] = field(default_factory=dict)
    # "sync": judge each protocol at its own report times; "continuous": every grid step
    eval_mode: str = "sync"


def run_seed(seed: int, run: int) -> int:
    """Seed for run ``run`` of an experiment seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, run]).generate_state(1, np.uint64)[0])


def query_grid(source: Source, cfg: BenchConfig) -> np.ndarray:
    if isinstance(source, OffsetTrace):
        return source.times_us()
    n = cfg.duration.ticks // cfg.step.ticks + 1
    return source.epoch.ticks + cfg.step.ticks * np.arange(n, dtype=np.int64)


def make_stream(source: Source, noise: NoiseModel, cfg: BenchConfig | None = None) -> MeasurementStream:
    cfg = cfg or BenchConfig()
    grid = query_grid(source, cfg)
    z, u = noise_draws(noise.seed, len(grid))
    return apply_noise(grid, truth_at(source, grid), noise, z, u)


def _errors(run: ProtocolRun, stream: MeasurementStream, mode: str) -> np.ndarray:
    if mode == "sync":
        return run.errors
    if mode == "continuous":
        return run.continuous_errors(stream)
    raise ValueError(f"unknown eval_mode {mode!r}")


def rate_error_report(run: ProtocolRun, skip: TimeSpan = TimeSpan(0)) -> float:
    """RMSE (ms) of offsets predicted from each sync point's offset and skew,
    checked at the following sync point.

    ``skip`` drops predictions landing within that span of the first sync.
    """
    if run.rate_errors is None:
        raise ValueError(f"{run.protocol} has no rate synchronization")
    if len(run.times) < 2:
        raise ValueError("rate error needs at least two sync points")
    keep = run.times[1:] - run.times[0] >= skip.ticks
    e = run.rate_errors[keep] / US_PER_MS
    if e.size == 0:
        raise ValueError("no sync points left after the convergence skip")
    return float(np.sqrt(np.mean(e**2)))


@dataclass(frozen=True)
class PollingProfile:
    poll_count: int
    times: np.ndarray  # us
    intervals: np.ndarray  # us, interval chosen after each poll

    @property
    def max_interval(self) -> int:
        return int(self.intervals.max())


def polling_profile(run: ProtocolRun) -> PollingProfile:
    if run.intervals is None:
        raise ValueError(f"{run.protocol} has a fixed polling interval")
    return PollingProfile(run.poll_count, run.times, run.intervals)


def simulate_spot(
    source: Source,
    noise: NoiseModel | None = None,
    policy: PollingPolicy | None = None,
    error_margin: TimeSpan = DEFAULT_ERROR_MARGIN,
    duration: TimeSpan = DAY,
) -> ProtocolRun:
    """One SPoT run over ``source`` (noiseless unless ``noise`` is given)."""
    noise = noise or NoiseModel(TimeSpan(0))
    stream = make_stream(source, noise, BenchConfig(duration=duration, path_rtt=noise.path_rtt))
    return run_spot(stream, policy, error_margin)


def run_comparison(
    source: Source,
    levels: Iterable[NoiseLevel | str],
    protocols: Sequence[str] = PROTOCOLS,
    runs: int = 100,
    seed: int = 0,
    config: BenchConfig | None = None,
) -> ExperimentReport:
    """Drive every protocol over identical per-run noise and average stats.

    Within run ``r`` every protocol and every noise level share one set of
    standard-normal draws and injection decisions, scaled per level, so
    cross-protocol differences come from filtering alone.
    """
    cfg = config or BenchConfig()
    levels = [lv if isinstance(lv, NoiseLevel) else NoiseLevel.parse(lv) for lv in levels]
    protocols = [p.lower() for p in protocols]
    unknown = set(protocols) - set(PROTOCOLS)
    if unknown:
        raise ValueError(f"unknown protocols: {sorted(unknown)}")
    if runs < 1:
        raise ValueError("runs must be at least 1")

    grid = query_grid(source, cfg)
    true = truth_at(source, grid)
    acc: dict[tuple[str, str], dict[str, list]] = {}
    for r in range(runs):
        z, u = noise_draws(run_seed(seed, r), len(grid))
        for lv in levels:
            noise = NoiseModel(lv.std_dev, cfg.inject_prob, cfg.path_rtt)
            stream = apply_noise(grid, true, noise, z, u)
            for p in protocols:
                try:
                    run = run_protocol(
                        p, stream, policy=cfg.policy, error_margin=cfg.error_margin, baseline=cfg.baselines
                    )
                except Exception as exc:
                    raise RuntimeError(f"{p} failed at noise {lv.label}, run {r}") from exc
                slot = acc.setdefault((p, lv.label), {"stats": [], "raw": [], "rate": [], "polls": []})
                slot["stats"].append(ErrorStats.of(_errors(run, stream, cfg.eval_mode)))
                slot["raw"].append(ErrorStats.of(run.raw_errors))
                if p == SPOT:
                    slot["rate"].append(rate_error_report(run))
                    slot["polls"].append(run.poll_count)
        log.debug("run %d/%d done", r + 1, runs)

    report = ExperimentReport()
    for lv in levels:
        for p in protocols:
            slot = acc[(p, lv.label)]
            report.rows.append(
                ProtocolReport(
                    protocol=p,
                    level=lv,
                    stats=ErrorStats.mean_of(slot["stats"]),
                    raw=ErrorStats.mean_of(slot["raw"]),
                    runs_averaged=runs,
                    rate_rmse=float(np.mean(slot["rate"])) if slot["rate"] else None,
                    poll_count=float(np.mean(slot["polls"])) if slot["polls"] else None,
                )
            )
    return report


def throughput_pps(poll_count: float, duration: TimeSpan, clients: int) -> float:
    """Server probe rate needed for ``clients`` that each poll ``poll_count``
    times per ``duration``."""
    return poll_count / duration.seconds * clients
