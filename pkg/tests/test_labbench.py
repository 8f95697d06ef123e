import math

import numpy as np
import pytest

from spotsync.labbench.allan import (
    AllanError,
    adev_from_phase,
    allan_deviation,
    octave_taus,
    random_walk_frequency,
    white_phase_noise,
)
from spotsync.labbench.harness import (
    BenchConfig,
    ErrorStats,
    NoiseLevel,
    make_stream,
    polling_profile,
    rate_error_report,
    run_comparison,
    simulate_spot,
    throughput_pps,
)
from spotsync.labbench.noise import NoiseModel, apply_noise, synthesize_measurements
from spotsync.labbench.protocols import PROTOCOLS, run_protocol
from spotsync.labbench.report import REPORT_COLUMNS, emit_report
from spotsync.syncalgo import PollingPolicy, PollingStyle
from spotsync.timebase import US_PER_MS, US_PER_S, ClockModel, OffsetTrace, OutOfRangeError, TimePoint, TimeSpan

MS = US_PER_MS
S = US_PER_S
HOUR = TimeSpan(3600 * S)


# noise injection


def test_zero_noise_is_identity():
    times = np.arange(0, 100 * S, S)
    st = synthesize_measurements(ClockModel.linear(20_000), NoiseModel(TimeSpan(0)), times)
    assert np.array_equal(st.measured, st.true)
    assert np.all(st.rtt == 300 * MS)


def test_noisy_branch_construction():
    st = apply_noise(np.array([0]), np.array([10 * MS]), NoiseModel(TimeSpan(50 * MS)), np.array([1.0]), np.array([0.0]))
    assert st.measured[0] == 60 * MS
    assert st.rtt[0] == 400 * MS
    assert st.noisy[0]


def test_noise_monte_carlo():
    n = 100_000
    st = synthesize_measurements(
        ClockModel.linear(0), NoiseModel(TimeSpan(250 * MS), seed=5), np.arange(n, dtype=np.int64) * S
    )
    assert abs(st.noisy.mean() - 0.5) < 0.01
    assert abs(st.noise_us().mean()) < 2.5 * MS
    assert np.all(st.rtt >= 300 * MS)
    clean = ~st.noisy
    assert np.all(st.measured[clean] == st.true[clean]) and np.all(st.rtt[clean] == 300 * MS)


def test_noise_deterministic_under_seed():
    times = np.arange(0, 1000 * S, S)
    a = synthesize_measurements(ClockModel.linear(0), NoiseModel(TimeSpan(MS), seed=3), times)
    b = synthesize_measurements(ClockModel.linear(0), NoiseModel(TimeSpan(MS), seed=3), times)
    assert np.array_equal(a.measured, b.measured)


def test_noise_model_invariants():
    with pytest.raises(ValueError):
        NoiseModel(TimeSpan(-1))
    with pytest.raises(ValueError):
        NoiseModel(TimeSpan(0), inject_prob=1.5)
    with pytest.raises(ValueError):
        NoiseModel(TimeSpan(0), path_rtt=TimeSpan(0))


def test_query_errors():
    trace = OffsetTrace.from_model(ClockModel.linear(0), TimePoint(0), TimeSpan(10 * S), TimeSpan(S))
    with pytest.raises(OutOfRangeError):
        synthesize_measurements(trace, NoiseModel(TimeSpan(0)), [0, 11 * S])
    with pytest.raises(ValueError):
        synthesize_measurements(trace, NoiseModel(TimeSpan(0)), [5 * S, 2 * S])


def test_noise_level_parse():
    assert NoiseLevel.parse("high").std_dev == TimeSpan(250 * MS)
    assert NoiseLevel.parse("sigma=75").std_dev == TimeSpan(75 * MS)
    assert NoiseLevel.parse("σ=12.5").std_dev == TimeSpan(12_500)
    with pytest.raises(ValueError):
        NoiseLevel.parse("loud")


# protocol comparison


def test_noiseless_all_protocols_exact():
    cfg = BenchConfig(duration=TimeSpan(4 * 3600 * S))
    rep = run_comparison(ClockModel.linear(20_000), [NoiseLevel("zero", TimeSpan(0))], runs=1, config=cfg)
    for p in PROTOCOLS:
        if p == "mqtt":
            continue
        assert rep.get(p, "zero").stats.rmse < 1.0
    # pushed timestamps are always half the path RTT late
    assert rep.get("mqtt", "zero").stats.rmse == pytest.approx(150.0)


def test_raw_equals_filtered_for_unfiltered_protocols():
    cfg = BenchConfig(duration=TimeSpan(6 * 3600 * S))
    rep = run_comparison(ClockModel.linear(20_000), ["medium"], ["sntp", "mqtt", "spot"], runs=2, config=cfg)
    assert rep.get("sntp", "medium").raw == rep.get("sntp", "medium").stats
    row = rep.get("spot", "medium")
    assert row.stats.min <= row.stats.max
    assert row.rate_rmse is not None and row.poll_count is not None


def test_fairness_shared_noise_across_protocols():
    cfg = BenchConfig(duration=TimeSpan(2 * 3600 * S))
    model = ClockModel.linear(0)
    a = run_comparison(model, ["high"], ["sntp"], runs=3, seed=4, config=cfg)
    b = run_comparison(model, ["high"], ["sntp", "spot", "consensus"], runs=3, seed=4, config=cfg)
    assert a.get("sntp", "high").stats == b.get("sntp", "high").stats


def test_spot_raw_matches_sntp_when_polled_together():
    # both consume raw two-way offsets of the same noisy stream
    model = ClockModel.linear(0)
    errs_spot, errs_sntp = [], []
    for seed in range(5):
        stream = make_stream(model, NoiseModel(TimeSpan(150 * MS), seed=seed), BenchConfig(duration=DAY_6H))
        errs_spot.append(ErrorStats.of(run_protocol("spot", stream).raw_errors).rmse)
        errs_sntp.append(ErrorStats.of(run_protocol("sntp", stream).raw_errors).rmse)
    assert np.mean(errs_spot) == pytest.approx(np.mean(errs_sntp), rel=0.25)


DAY_6H = TimeSpan(6 * 3600 * S)


def test_spot_max_below_sntp_max_per_seed():
    model = ClockModel.linear(20_000)
    for seed in range(3):
        stream = make_stream(model, NoiseModel(TimeSpan(250 * MS), seed=seed), BenchConfig(duration=DAY_6H))
        spot = np.abs(run_protocol("spot", stream).errors).max()
        sntp = np.abs(run_protocol("sntp", stream).errors).max()
        assert spot <= sntp


def test_determinism():
    cfg = BenchConfig(duration=TimeSpan(2 * 3600 * S))
    a = emit_report(run_comparison(ClockModel.linear(1000), ["low", "high"], runs=2, seed=9, config=cfg))
    b = emit_report(run_comparison(ClockModel.linear(1000), ["low", "high"], runs=2, seed=9, config=cfg))
    assert a == b


def test_comparison_argument_errors():
    with pytest.raises(ValueError):
        run_comparison(ClockModel.linear(0), ["low"], ["ntpd"], runs=1)
    with pytest.raises(ValueError):
        run_comparison(ClockModel.linear(0), ["low"], runs=0)


def test_continuous_mode_runs():
    cfg = BenchConfig(duration=TimeSpan(2 * 3600 * S), eval_mode="continuous")
    rep = run_comparison(ClockModel.linear(20_000), ["low"], runs=1, config=cfg)
    assert len(rep.rows) == len(PROTOCOLS)


# rate error and polling


def test_rate_error_zero_skew():
    run = simulate_spot(ClockModel.linear(0), duration=DAY_6H)
    assert rate_error_report(run) == pytest.approx(0.0, abs=0.01)


def test_rate_error_linear_after_convergence():
    run = simulate_spot(ClockModel.linear(20_000), duration=DAY_6H)
    assert rate_error_report(run, skip=TimeSpan(600 * S)) < 1.0


def test_rate_error_needs_two_points():
    run = simulate_spot(ClockModel.linear(0), duration=TimeSpan(30 * S))
    with pytest.raises(ValueError):
        rate_error_report(run)


def test_polling_profile_shape():
    run = simulate_spot(ClockModel.linear(20_000), policy=PollingPolicy(style=PollingStyle.MIMD), duration=DAY_6H)
    prof = polling_profile(run)
    assert prof.max_interval == 1024 * S
    assert prof.poll_count == len(prof.times) + 7  # bootstrap burst
    assert len(prof.intervals) == len(prof.times)


def test_throughput_arithmetic():
    assert throughput_pps(953, TimeSpan(86_400 * S), 1_000_000) == pytest.approx(11_030, rel=1e-3)


# Allan deviation


def _trace(phase_us, period=S):
    n = len(phase_us)
    return OffsetTrace.from_arrays(np.arange(n) * period, np.asarray(phase_us, dtype=np.int64), sample_period=TimeSpan(period))


def test_adev_constant_and_linear_are_zero():
    taus = [TimeSpan(S), TimeSpan(4 * S), TimeSpan(16 * S)]
    assert allan_deviation(_trace([5000] * 100), taus).adevs == (0.0, 0.0, 0.0)
    assert allan_deviation(_trace(np.arange(100) * 20), taus).adevs == (0.0, 0.0, 0.0)


def test_adev_hand_computed():
    # x = 0, 1, 0, 1 us at 1 s: second differences +-2 us, AVAR = 4e-12 / 2
    series = allan_deviation(_trace([0, 1, 0, 1]), [TimeSpan(S)])
    assert series.adevs[0] == pytest.approx(math.sqrt(2e-12))
    assert series.counts == (2,)


def test_adev_errors():
    tr = _trace(np.zeros(10))
    with pytest.raises(AllanError):
        allan_deviation(tr, [TimeSpan(1500 * MS)])
    with pytest.raises(AllanError):
        allan_deviation(tr, [TimeSpan(5 * S)])  # only 2 decimated points
    with pytest.raises(AllanError):
        allan_deviation(tr, [TimeSpan(2 * S), TimeSpan(S)])
    ragged = OffsetTrace.from_arrays([0, S, 3 * S, 4 * S], [0, 0, 0, 0], sample_period=TimeSpan(S))
    with pytest.raises(AllanError):
        allan_deviation(ragged, [TimeSpan(S)])


def test_white_phase_closed_form():
    sigma = 1e-3
    x = white_phase_noise(10_000, sigma, seed=1)
    factors = [1, 2, 4, 8, 16]
    adevs, _ = adev_from_phase(x, 1.0, factors)
    for m, a in zip(factors, adevs):
        assert a == pytest.approx(math.sqrt(3) * sigma / m, rel=0.1)


def test_allan_intercept_shape():
    # white phase noise plus random-walk frequency: slope -1 at short tau, positive later
    n = 2**16
    x = white_phase_noise(n, 1e-3, seed=3) + random_walk_frequency(n, 1e-6, 1.0, seed=4)
    tr = _trace(np.round(x * 1e6))
    series = allan_deviation(tr, octave_taus(TimeSpan(S), n, max_factor=8192))
    assert series.slope(tau_max=8) < -0.7
    assert series.slope(tau_min=1024) > 0.2
    best = series.intercept().seconds
    assert 8 < best < 1024


def test_octave_taus_respects_point_count():
    taus = octave_taus(TimeSpan(S), 9)
    assert [t.seconds for t in taus] == [1, 2, 4]


# report


def test_report_rows_and_header(tmp_path):
    cfg = BenchConfig(duration=TimeSpan(3600 * S))
    rep = run_comparison(ClockModel.linear(0), ["low", "medium", "high"], runs=1, config=cfg)
    text = emit_report(rep, tmp_path / "r.csv")
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 16
    assert (tmp_path / "r.csv").read_text() == text
    md = emit_report(rep, fmt="markdown")
    assert md.splitlines()[0].startswith("| protocol |")


def test_empty_report_header_only():
    rep = run_comparison(ClockModel.linear(0), ["low"], [], runs=1, config=BenchConfig(duration=TimeSpan(600 * S)))
    assert emit_report(rep) == ",".join(REPORT_COLUMNS) + "\n"
