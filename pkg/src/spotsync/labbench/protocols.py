"""Protocol drivers that replay a :class:`MeasurementStream`.

Each driver polls the stream on its own schedule and returns a
:class:`ProtocolRun`: the offsets it reported, the ground truth they are
judged against, the raw measurements it consumed, and enough state to
evaluate its error continuously between polls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spotsync.baselines import (
    BaselineConfig,
    BaselineKind,
    consensus_offset,
    consensus_survivors,
    minrtt_index,
    mqtt_push_offset,
    sntp_offset,
)
from spotsync.labbench.noise import MeasurementStream
from spotsync.syncalgo import (
    DEFAULT_ERROR_MARGIN,
    ExchangeSample,
    PollingPolicy,
    SyncState,
    bootstrap,
    process_measurement,
)
from spotsync.timebase import US_PER_S, TimePoint, TimeSpan

SPOT = "spot"
DEFAULT_BOOTSTRAP_BURST = 8
DEFAULT_BOOTSTRAP_SPACING = TimeSpan(US_PER_S)
PROTOCOLS = (SPOT, "sntp", "mqtt", "consensus", "minrtt")


@dataclass
class ProtocolRun:
    """Outcome of one protocol over one stream (all values in us)."""

    protocol: str
    times: np.ndarray  # when each offset was reported
    reported: np.ndarray
    truth: np.ndarray
    raw_errors: np.ndarray
    # SPoT only
    skews_ppb: np.ndarray | None = None
    rate_errors: np.ndarray | None = None
    intervals: np.ndarray | None = None
    qualities: list[str] = field(default_factory=list)
    # exchanges made beyond one per report (bursts)
    extra_polls: int = 0

    @property
    def errors(self) -> np.ndarray:
        return self.reported - self.truth

    @property
    def poll_count(self) -> int:
        """Number of two-way measurements made."""
        return len(self.times) + self.extra_polls

    def continuous_errors(self, stream: MeasurementStream) -> np.ndarray:
        """Error at every stream instant from the first report on.

        Baselines hold their last report; SPoT extrapolates it at its skew.
        """
        first = int(np.searchsorted(stream.times, self.times[0]))
        grid = stream.times[first:]
        k = np.searchsorted(self.times, grid, side="right") - 1
        est = self.reported[k].astype(np.float64)
        if self.skews_ppb is not None:
            est += self.skews_ppb[k] * (grid - self.times[k]) / 1e9
        return np.round(est).astype(np.int64) - stream.true[first:]


def _grid(stream: MeasurementStream, start: int, step: int) -> range:
    return range(start, int(stream.times[-1]) + 1, step)


def run_spot(
    stream: MeasurementStream,
    policy: PollingPolicy | None = None,
    error_margin: TimeSpan = DEFAULT_ERROR_MARGIN,
    bootstrap_burst: int = DEFAULT_BOOTSTRAP_BURST,
    bootstrap_spacing: TimeSpan = DEFAULT_BOOTSTRAP_SPACING,
) -> ProtocolRun:
    """SPoT over ``stream``; the first poll is a ``bootstrap_burst``-sample burst."""
    state = SyncState(policy=policy or PollingPolicy(), error_margin=error_margin)
    times, reported, truth, raw, skews, rate_err, intervals, qual = [], [], [], [], [], [], [], []
    t = int(stream.times[0])
    end = int(stream.times[-1])

    idx = [stream.index_at(min(end, t + j * bootstrap_spacing.ticks)) for j in range(bootstrap_burst)]
    upd = bootstrap(
        state,
        [(TimeSpan(int(stream.measured[i])), TimeSpan(int(stream.rtt[i])), TimePoint(int(stream.times[i]))) for i in idx],
    )
    i = stream.index_at(state.last_sync_time.ticks)
    times.append(int(stream.times[i]))
    reported.append(upd.corrected_offset.ticks)
    truth.append(int(stream.true[i]))
    raw.extend(int(stream.measured[j] - stream.true[j]) for j in idx)
    skews.append(upd.skew.ppb)
    intervals.append(upd.next_poll_in.ticks)
    qual.append(upd.sample_quality.value)
    t = times[0] + upd.next_poll_in.ticks

    while t <= end:
        i = stream.index_at(t)
        now = TimePoint(t)
        predicted = state.offset + state.skew.drift_over(now - state.last_sync_time)
        rate_err.append(predicted.ticks - int(stream.true[i]))
        upd = process_measurement(state, TimeSpan(int(stream.measured[i])), TimeSpan(int(stream.rtt[i])), now)
        times.append(t)
        reported.append(upd.corrected_offset.ticks)
        truth.append(int(stream.true[i]))
        raw.append(int(stream.measured[i] - stream.true[i]))
        skews.append(upd.skew.ppb)
        intervals.append(upd.next_poll_in.ticks)
        qual.append(upd.sample_quality.value)
        t += upd.next_poll_in.ticks
    return ProtocolRun(
        SPOT,
        np.array(times, dtype=np.int64),
        np.array(reported, dtype=np.int64),
        np.array(truth, dtype=np.int64),
        np.array(raw, dtype=np.int64),
        skews_ppb=np.array(skews, dtype=np.int64),
        rate_errors=np.array(rate_err, dtype=np.int64),
        intervals=np.array(intervals, dtype=np.int64),
        qualities=qual,
        extra_polls=bootstrap_burst - 1,
    )


def run_sntp(stream: MeasurementStream, cfg: BaselineConfig) -> ProtocolRun:
    times, reported, truth = [], [], []
    for t in _grid(stream, int(stream.times[0]), cfg.polling_interval.ticks):
        i = stream.index_at(t)
        sample = ExchangeSample.synthetic(
            TimePoint(t), TimeSpan(int(stream.measured[i])), TimeSpan(int(stream.rtt[i]))
        )
        times.append(t)
        reported.append(sntp_offset(sample).ticks)
        truth.append(int(stream.true[i]))
    rep = np.array(reported, dtype=np.int64)
    tru = np.array(truth, dtype=np.int64)
    return ProtocolRun("sntp", np.array(times, dtype=np.int64), rep, tru, rep - tru)


def run_mqtt(stream: MeasurementStream, cfg: BaselineConfig) -> ProtocolRun:
    """Pushed timestamps arrive one OWD late: half the path RTT plus any
    injected noise magnitude, i.e. half the synthesized RTT."""
    times, reported, truth = [], [], []
    for t in _grid(stream, int(stream.times[0]), cfg.polling_interval.ticks):
        i = stream.index_at(t)
        true = TimeSpan(int(stream.true[i]))
        owd = TimeSpan(int(stream.rtt[i]) // 2)
        times.append(t)
        reported.append(mqtt_push_offset(true, owd).ticks)
        truth.append(true.ticks)
    rep = np.array(reported, dtype=np.int64)
    tru = np.array(truth, dtype=np.int64)
    return ProtocolRun("mqtt", np.array(times, dtype=np.int64), rep, tru, rep - tru)


def run_burst(stream: MeasurementStream, cfg: BaselineConfig) -> ProtocolRun:
    """Consensus or MinRTT: a burst of samples every polling interval."""
    span = (cfg.burst_count - 1) * cfg.burst_spacing.ticks
    end = int(stream.times[-1])
    times, reported, truth, raw = [], [], [], []
    for t in _grid(stream, int(stream.times[0]), cfg.polling_interval.ticks):
        if t + span > end:
            break
        idx = [stream.index_at(t + j * cfg.burst_spacing.ticks) for j in range(cfg.burst_count)]
        burst = [(TimeSpan(int(stream.measured[i])), TimeSpan(int(stream.rtt[i]))) for i in idx]
        raw.extend(int(stream.measured[i] - stream.true[i]) for i in idx)
        if cfg.kind is BaselineKind.CONSENSUS:
            keep = consensus_survivors([off.ticks for off, _ in burst])
            reported.append(consensus_offset(burst).ticks)
            truth.append(round(sum(int(stream.true[idx[k]]) for k in keep) / len(keep)))
            times.append(int(stream.times[idx[-1]]))
        else:
            k = minrtt_index(burst)
            reported.append(burst[k][0].ticks)
            truth.append(int(stream.true[idx[k]]))
            times.append(int(stream.times[idx[k]]))
    return ProtocolRun(
        cfg.kind.value,
        np.array(times, dtype=np.int64),
        np.array(reported, dtype=np.int64),
        np.array(truth, dtype=np.int64),
        np.array(raw, dtype=np.int64),
        extra_polls=len(times) * (cfg.burst_count - 1),
    )


def run_protocol(
    name: str,
    stream: MeasurementStream,
    *,
    policy: PollingPolicy | None = None,
    error_margin: TimeSpan = DEFAULT_ERROR_MARGIN,
    baseline: dict[str, BaselineConfig] | None = None,
) -> ProtocolRun:
    name = name.lower()
    if name == SPOT:
        return run_spot(stream, policy, error_margin)
    kind = BaselineKind(name)
    cfg = (baseline or {}).get(name) or BaselineConfig(kind)
    if kind is BaselineKind.SNTP:
        return run_sntp(stream, cfg)
    if kind is BaselineKind.MQTT_PUSH:
        return run_mqtt(stream, cfg)
    return run_burst(stream, cfg)
