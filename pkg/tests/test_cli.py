import csv
import io

import pytest

from spotsync.labbench.cli import main as spotbench, parse_duration, parse_model
from spotsync.labbench.report import REPORT_COLUMNS
from spotsync.netnode.cli import main as spotd
from spotsync.timebase import US_PER_S, ClockModel, OffsetTrace, TimePoint, TimeSpan, save_trace

S = US_PER_S


@pytest.mark.parametrize("text,seconds", [("90", 90), ("300s", 300), ("5m", 300), ("24h", 86_400), ("1d", 86_400)])
def test_parse_duration(text, seconds):
    assert parse_duration(text) == TimeSpan(seconds * S)


def test_parse_duration_rejects():
    with pytest.raises(ValueError):
        parse_duration("soon")


def test_parse_model_variants():
    assert parse_model("linear:skew_ppb=20000").offset_us(1000 * S) == 20_000
    rw = parse_model("rw:skew_ppb=0,wander=1e4,seed=3")
    assert rw.offset_us(100 * S) == parse_model("random-walk:skew_ppb=0,wander=1e4,seed=3").offset_us(100 * S)
    pw = parse_model("piecewise:0=20000,100=-10000")
    assert pw.offset_us(200 * S) == 1000


@pytest.mark.parametrize("text", ["cubic:", "linear:skew=3", "linear:skew_ppb"])
def test_parse_model_rejects(text):
    with pytest.raises(ValueError):
        parse_model(text)


def test_spotbench_run_model(tmp_path):
    out = tmp_path / "r.csv"
    rc = spotbench(["run", "--model", "linear:skew_ppb=20000", "--noise", "low,sigma=75", "--runs", "1",
                    "--duration", "2h", "--protocols", "spot,sntp", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == list(REPORT_COLUMNS)
    assert {(r["protocol"], r["noise_level"]) for r in rows} == {
        ("spot", "low"), ("sntp", "low"), ("spot", "sigma=75"), ("sntp", "sigma=75")}


def test_spotbench_run_trace_and_allan(tmp_path, capsys):
    trace = OffsetTrace.from_model(ClockModel.linear(20_000), TimePoint(0), TimeSpan(3600 * S), TimeSpan(S))
    path = tmp_path / "trace.csv"
    save_trace(trace, path)
    assert spotbench(["run", "--trace", str(path), "--noise", "high", "--runs", "1", "--format", "markdown"]) == 0
    assert capsys.readouterr().out.startswith("| protocol |")
    adev = tmp_path / "adev.csv"
    assert spotbench(["allan", "--trace", str(path), "--taus", "1,2,4", "--out", str(adev)]) == 0
    lines = adev.read_text().splitlines()
    assert lines[0] == "tau_s,adev,n" and len(lines) == 4


def test_spotbench_poll(tmp_path):
    out = tmp_path / "poll.csv"
    assert spotbench(["poll", "--model", "linear:skew_ppb=20000", "--style", "mimd", "--duration", "6h",
                      "--out", str(out)]) == 0
    text = out.read_text().splitlines()
    assert text[0] == "time_s,interval_s"
    assert text[-1].startswith("# poll_count,")
    assert max(float(line.split(",")[1]) for line in text[1:-1]) == 1024


def test_spotbench_errors_exit_2(tmp_path, capsys):
    assert spotbench(["allan", "--trace", str(tmp_path / "missing.csv")]) == 2
    assert spotbench(["run", "--model", "warp:", "--runs", "1"]) == 2
    assert "spotbench: error" in capsys.readouterr().err


def test_spotd_serve_and_query(capsys):
    assert spotd(["serve", "--host", "127.0.0.1", "--port", "0", "--duration", "0.2"]) == 0
    assert "registered=0" in capsys.readouterr().out


def test_spotd_query_timeout_exit_2(capsys):
    import socket

    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
        rc = spotd(["query", "--server", f"127.0.0.1:{port}", "--timeout", "0.2"])
    assert rc == 2
    assert "spotd: error" in capsys.readouterr().err
