"""Deterministic CSV and markdown serialization of bench results."""

from __future__ import annotations

import csv
import io
import math
import os
from typing import Iterable

from spotsync.labbench.allan import AllanSeries
from spotsync.labbench.harness import ExperimentReport, PollingProfile, ProtocolReport
from spotsync.timebase import US_PER_S

REPORT_COLUMNS = (
    "protocol",
    "noise_level",
    "rmse_ms",
    "raw_rmse_ms",
    "min_ms",
    "max_ms",
    "std_ms",
    "rate_rmse_ms",
    "poll_count",
)


def _num(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.3f}"


def report_rows(report: ExperimentReport) -> list[list[str]]:
    return [_row(r) for r in report.rows]


def _row(r: ProtocolReport) -> list[str]:
    return [
        r.protocol,
        r.level.label,
        _num(r.stats.rmse),
        _num(r.raw.rmse),
        _num(r.stats.min),
        _num(r.stats.max),
        _num(r.stats.std),
        _num(r.rate_rmse),
        _num(r.poll_count),
    ]


def render_csv(header: Iterable[str], rows: Iterable[Iterable[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_markdown(header: Iterable[str], rows: Iterable[Iterable[str]]) -> str:
    header = list(header)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, path: str | os.PathLike | None = None, fmt: str = "csv") -> str:
    """Serialize ``report`` as ``csv`` or ``markdown``; write it if ``path`` is given.

    Returns:
        The serialized text. Same report in, same bytes out.
    """
    rows = report_rows(report)
    if fmt == "csv":
        text = render_csv(REPORT_COLUMNS, rows)
    elif fmt in ("markdown", "md"):
        text = render_markdown(REPORT_COLUMNS, rows)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def emit_allan(series: AllanSeries, path: str | os.PathLike | None = None) -> str:
    rows = [[f"{t.seconds:g}", f"{a:.6e}", str(n)] for (t, a), n in zip(series, series.counts)]
    text = render_csv(("tau_s", "adev", "n"), rows)
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def emit_polling(profile: PollingProfile, path: str | os.PathLike | None = None) -> str:
    t0 = int(profile.times[0]) if len(profile.times) else 0
    rows = [
        [f"{(int(t) - t0) / US_PER_S:.3f}", f"{int(iv) / US_PER_S:.3f}"]
        for t, iv in zip(profile.times, profile.intervals)
    ]
    text = render_csv(("time_s", "interval_s"), rows)
    text += f"# poll_count,{profile.poll_count}\n"
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
