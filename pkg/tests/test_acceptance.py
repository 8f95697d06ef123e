"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import csv
import math
import os
import random
import signal
import socket
import subprocess
import sys
import time
import tracemalloc
from collections import defaultdict

import numpy as np
import pytest

from spotsync.labbench.allan import (
    adev_from_phase,
    allan_deviation,
    octave_taus,
    random_walk_frequency,
    white_phase_noise,
)
from spotsync.labbench.harness import (
    DAY,
    polling_profile,
    rate_error_report,
    run_comparison,
    simulate_spot,
    throughput_pps,
)
from spotsync.labbench.noise import NoiseModel
from spotsync.netnode.server import SpotServer
from spotsync.syncalgo import (
    DEFAULT_ERROR_MARGIN,
    ExchangeSample,
    PollingPolicy,
    PollingStyle,
    SyncState,
    bootstrap,
    exchange_offset,
    exchange_rtt,
    filter_offset,
    process_measurement,
)
from spotsync.timebase import US_PER_MS, US_PER_S, ClockModel, OffsetTrace, TimePoint, TimeSpan
from spotsync.wire import ClientMode, Kind, Message, RegistrationBody, WireError, WireStyle, decode, encode

sys.path.insert(0, os.path.dirname(__file__))
from wire_gen import random_message  # noqa: E402

MS = US_PER_MS
S = US_PER_S
LEVELS = {"low": 50, "medium": 150, "high": 250}


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line, then assert."""

    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}")
        assert ok, f"criterion {n} failed: {detail}"

    return emit


def ms(x):
    return TimeSpan(int(x * MS))


# 1


def test_criterion_1_filter_golden(verdict):
    start = time.perf_counter()
    results = []
    for t2, measured in ((400, 120), (200, -80)):
        sample = ExchangeSample(*(TimePoint(v * MS) for v in (-20, t2, t2, 580)))
        assert exchange_rtt(sample) == ms(600) and exchange_offset(sample) == ms(measured)
        state = SyncState(error_margin=ms(10))
        bootstrap(state, [(ms(20), ms(400), TimePoint(0))])
        corrected, _ = filter_offset(state, exchange_offset(sample), exchange_rtt(sample), TimePoint(S))
        results.append(corrected)
    elapsed = time.perf_counter() - start
    ok = results == [ms(20), ms(20)] and elapsed < 1.0
    verdict(1, "asymmetric samples corrected to +20 ms", ok,
            f"forward={results[0].ticks}us reverse={results[1].ticks}us in {elapsed:.3f}s")


# 2


def test_criterion_2_sntp_analytic(verdict):
    start = time.perf_counter()
    rep = run_comparison(ClockModel.linear(20_000), list(LEVELS), ["sntp"], runs=100, seed=2)
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed < 60
    for label, sigma in LEVELS.items():
        got = rep.get("sntp", label).stats.rmse
        expected = sigma * math.sqrt(0.5)
        ok &= abs(got / expected - 1) <= 0.15
        parts.append(f"{label} {got:.1f}ms vs {expected:.1f}ms")
    verdict(2, "SNTP RMSE = sigma*sqrt(p) within 15%", ok, "; ".join(parts) + f"; {elapsed:.1f}s")


# 3


def test_criterion_3_spot_robustness(verdict):
    start = time.perf_counter()
    rep = run_comparison(ClockModel.linear(20_000), list(LEVELS), ["spot", "sntp"], runs=100, seed=3)
    elapsed = time.perf_counter() - start
    bound = 2 * DEFAULT_ERROR_MARGIN.ticks / MS
    spot = {lv: rep.get("spot", lv).stats.rmse for lv in LEVELS}
    ratio = rep.get("sntp", "high").stats.rmse / spot["high"]
    ok = all(v <= bound for v in spot.values()) and ratio >= 8 and elapsed < 300
    detail = ", ".join(f"{k} {v:.2f}ms" for k, v in spot.items())
    verdict(3, "SPoT RMSE <= 2EM and >= 8x better than SNTP at high noise", ok,
            f"{detail}; ratio {ratio:.1f}x; {elapsed:.1f}s")


# 4


def test_criterion_4_error_ordering(verdict):
    failures, worst = [], {"spot_max": 0.0, "spot_std": 0.0, "mqtt_min": math.inf}
    for seed in range(10):
        rep = run_comparison(ClockModel.linear(20_000), ["high"], ["spot", "consensus", "mqtt"], runs=1, seed=seed)
        spot, cons, mqtt = (rep.get(p, "high") for p in ("spot", "consensus", "mqtt"))
        raw_max = spot.raw.max
        if not (spot.stats.max < cons.stats.max < raw_max):
            failures.append(f"seed {seed}: {spot.stats.max:.1f} / {cons.stats.max:.1f} / {raw_max:.1f}")
        if mqtt.stats.min < 150.0 or spot.stats.std > 10.0:
            failures.append(f"seed {seed}: mqtt min {mqtt.stats.min:.1f}, spot std {spot.stats.std:.2f}")
        worst["spot_max"] = max(worst["spot_max"], spot.stats.max)
        worst["spot_std"] = max(worst["spot_std"], spot.stats.std)
        worst["mqtt_min"] = min(worst["mqtt_min"], mqtt.stats.min)
    detail = (f"10 seeds; worst spot max {worst['spot_max']:.1f}ms, spot std {worst['spot_std']:.2f}ms, "
              f"mqtt min {worst['mqtt_min']:.1f}ms" + ("; " + "; ".join(failures) if failures else ""))
    verdict(4, "spot max < consensus max < raw max, mqtt min >= 150 ms, spot std <= 10 ms", not failures, detail)


# 5


def test_criterion_5_rate_sync(verdict):
    model = ClockModel.linear(20_000)
    state = SyncState()
    for t in (0, 64 * S):
        process_measurement(state, TimeSpan(model.offset_us(t)), ms(300), TimePoint(t))
    skew_err = abs(state.skew.ppb - 20_000)
    rmses = []
    for seed in range(5):
        clock = ClockModel.random_walk(20_000, 1e5, seed=seed)
        run = simulate_spot(clock, NoiseModel(TimeSpan(250 * MS), seed=1000 + seed))
        rmses.append(rate_error_report(run))
    ok = skew_err <= 1000 and max(rmses) <= 25.0
    verdict(5, "skew within 1 ppm after two syncs; wandering-clock rate RMSE <= 25 ms", ok,
            f"skew {state.skew.ppb} ppb; rate RMSE {', '.join(f'{r:.2f}' for r in rmses)} ms")


# 6


def test_criterion_6_polling(verdict):
    stable = ClockModel.linear(20_000)
    mimd = polling_profile(simulate_spot(stable, policy=PollingPolicy(style=PollingStyle.MIMD)))
    aimd = polling_profile(simulate_spot(stable, policy=PollingPolicy(style=PollingStyle.AIMD)))
    ratio = aimd.poll_count / mimd.poll_count
    ok = mimd.max_interval == 1024 * S and ratio >= 1.5
    parts = [f"stable: mimd max {mimd.max_interval // S}s, polls aimd {aimd.poll_count} / mimd {mimd.poll_count} = {ratio:.2f}"]
    unstable = ClockModel.random_walk(0, 1e7, seed=1)
    for style, limit in ((PollingStyle.AIMD, 16 + 2 * 16), (PollingStyle.MIMD, 16 * 2**2)):
        prof = polling_profile(simulate_spot(unstable, policy=PollingPolicy(style=style)))
        settled = prof.intervals[prof.times - prof.times[0] >= 600 * S] / S
        med, p90 = float(np.median(settled)), float(np.percentile(settled, 90))
        ok &= med <= limit and p90 <= limit
        parts.append(f"unstable {style.value}: median {med:.0f}s p90 {p90:.0f}s (limit {limit}s)")
    verdict(6, "MIMD hits 1024 s, saves >= 1.5x polls; unstable clocks stay near 16 s", ok, "; ".join(parts))


# 7


def test_criterion_7_allan(verdict):
    start = time.perf_counter()
    n, sigma = 2**16, 1e-3
    taus = octave_taus(TimeSpan(S), n, max_factor=1024)
    wpm = white_phase_noise(n, sigma, seed=7)
    tr = OffsetTrace.from_arrays(np.arange(n) * S, np.round(wpm * 1e6).astype(np.int64), sample_period=TimeSpan(S))
    series = allan_deviation(tr, taus)
    slope_w = series.slope()
    mag_err = max(abs(a / (math.sqrt(3) * sigma / t.seconds) - 1) for t, a in series)
    rwfm = random_walk_frequency(n, 1e-9, 1.0, seed=8)
    adevs, _ = adev_from_phase(rwfm, 1.0, [t.ticks // S for t in taus])
    slope_r = float(np.polyfit(np.log10([t.seconds for t in taus]), np.log10(adevs), 1)[0])
    elapsed = time.perf_counter() - start
    ok = abs(slope_w + 1) <= 0.15 and mag_err <= 0.10 and abs(slope_r - 0.5) <= 0.15 and elapsed < 30
    verdict(7, "ADEV slopes -1 (white phase) and +0.5 (random-walk frequency)", ok,
            f"wpm slope {slope_w:.3f}, worst magnitude error {mag_err:.1%}; rwfm slope {slope_r:.3f}; {elapsed:.1f}s")


# 8


def test_criterion_8_wire(verdict):
    rng = random.Random(8)
    mismatches = 0
    for _ in range(100_000):
        m = random_message(rng)
        if decode(encode(m)) != m:
            mismatches += 1
    crashes = accepted = 0
    seeds = [encode(random_message(rng)) for _ in range(256)]
    for i in range(1_000_000):
        if i % 2:
            data = rng.randbytes(rng.randint(0, 64))
        else:
            buf = bytearray(rng.choice(seeds))
            for _ in range(rng.randint(1, 4)):
                op = rng.random()
                if op < 0.6 and buf:
                    buf[rng.randrange(len(buf))] = rng.randrange(256)
                elif op < 0.8:
                    del buf[rng.randrange(len(buf) + 1):]
                else:
                    buf += rng.randbytes(rng.randint(1, 8))
            data = bytes(buf)
        try:
            msg = decode(data)
        except WireError:
            continue
        except Exception:
            crashes += 1
            continue
        accepted += 1
        if encode(msg) != data:
            crashes += 1
    ok = mismatches == 0 and crashes == 0
    verdict(8, "codec round trip on 1e5 messages, 1e6 fuzzed datagrams without crash", ok,
            f"round-trip mismatches {mismatches}; fuzz crashes {crashes}; fuzz accepted {accepted}")


# 9


def _free_port():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _bytes_per_thin_client(n):
    srv = SpotServer(max_clients=n, clock=lambda: 10**12)
    body = RegistrationBody(ClientMode.THIN, WireStyle.AIMD, DEFAULT_ERROR_MARGIN.ticks)
    tracemalloc.start()
    base = tracemalloc.get_traced_memory()[0]
    for cid in range(1, n + 1):
        srv.handle(encode(Message(Kind.REGISTER, cid, 1, body)), ("127.0.0.1", 20000 + cid % 40000), 10**12)
    used = tracemalloc.get_traced_memory()[0] - base
    tracemalloc.stop()
    return used / n


def test_criterion_9_server_scale(verdict, tmp_path):
    n_clients, duration = 10_000, 300
    port = _free_port()
    srv_log, emu_log = tmp_path / "server.csv", tmp_path / "emulator.csv"
    spotd = [sys.executable, "-m", "spotsync.netnode.cli"]
    server = subprocess.Popen(
        spotd + ["serve", "--host", "127.0.0.1", "--port", str(port), "--log", str(srv_log)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        assert "listening" in server.stderr.readline()
        emu = subprocess.run(
            spotd + ["emulate", "--server", f"127.0.0.1:{port}", "--clients", str(n_clients),
                     "--clock-skew-ppb", "20000", "--duration", str(duration), "--log", str(emu_log)],
            capture_output=True, text=True, timeout=duration + 120,
        )
    finally:
        server.send_signal(signal.SIGTERM)
        server_out, _ = server.communicate(timeout=60)

    sq, cnt = defaultdict(float), defaultdict(int)
    for row in _read_rows(emu_log):
        sq[row["client_id"]] += float(row["error_ms"]) ** 2
        cnt[row["client_id"]] += 1
    per_client = [math.sqrt(sq[c] / cnt[c]) for c in cnt]
    mean_rmse = float(np.mean(per_client)) if per_client else math.inf
    lateness = np.array([float(r["lateness_ms"]) for r in _read_rows(srv_log)])
    late_max = float(lateness.max()) if lateness.size else math.inf

    small, large = _bytes_per_thin_client(1_000), _bytes_per_thin_client(10_000)
    mem_ratio = max(small, large) / min(small, large)

    polls = polling_profile(simulate_spot(ClockModel.linear(20_000))).poll_count
    pps = throughput_pps(polls, DAY, 1_000_000)
    ref_pps = throughput_pps(953, DAY, 1_000_000)
    arithmetic = math.isclose(pps, polls / 86_400 * 1e6) and round(ref_pps / 1000) == 11

    ok = (emu.returncode == 0 and len(per_client) == n_clients and mean_rmse < 5.0
          and late_max < 100.0 and mem_ratio <= 2.0 and arithmetic)
    detail = (f"{len(per_client)}/{n_clients} clients adjusted, mean RMSE {mean_rmse:.3f}ms; "
              f"probe lateness max {late_max:.1f}ms p99 {np.percentile(lateness, 99):.1f}ms over {lateness.size}; "
              f"memory/client {small:.0f}B @1k vs {large:.0f}B @10k; "
              f"{polls} polls/24h -> {pps:.0f} PPS per 1M clients (953 -> {ref_pps:.0f}); "
              f"emulator exit {emu.returncode}")
    if emu.returncode != 0:
        detail += f" stderr: {emu.stderr.strip()[-300:]}"
    verdict(9, "10k loopback thin clients for 5 min", ok, detail)
    assert "registered=" in server_out
