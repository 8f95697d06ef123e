"""``spotbench``: offline protocol comparison, Allan and polling analyses."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from typing import Sequence

from spotsync.labbench.allan import AllanError, allan_deviation
from spotsync.labbench.harness import BenchConfig, NoiseLevel, polling_profile, run_comparison, simulate_spot
from spotsync.labbench.noise import NoiseModel, Source
from spotsync.labbench.protocols import PROTOCOLS
from spotsync.labbench.report import emit_allan, emit_polling, emit_report
from spotsync.syncalgo import PollingPolicy, PollingStyle
from spotsync.timebase import ClockModel, TimePoint, TimeSpan, TraceError, load_trace

_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86400}


def parse_duration(text: str) -> TimeSpan:
    """``90``, ``300s``, ``5m``, ``24h`` or ``1d``."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*", text)
    if not m:
        raise ValueError(f"bad duration {text!r}")
    return TimeSpan.from_s(float(m.group(1)) * _UNITS[m.group(2) or "s"])


def _kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, (p.strip() for p in body.split(","))):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {part!r}")
        out[key.strip()] = value.strip()
    return out


def parse_model(text: str) -> ClockModel:
    """Build a clock model from a compact description.

    Examples:
        ``linear:skew_ppb=20000``
        ``random-walk:skew_ppb=20000,wander=1e5,seed=3``
        ``piecewise:0=20000,3600=-5000`` (segment start seconds = skew ppb)
    """
    kind, _, body = text.partition(":")
    kind = kind.strip().lower().replace("_", "-")
    params = _kv(body)
    if kind == "linear":
        model = ClockModel.linear(int(float(params.pop("skew_ppb", 0))))
    elif kind in ("random-walk", "rw"):
        model = ClockModel.random_walk(
            int(float(params.pop("skew_ppb", 0))),
            float(params.pop("wander", 0.0)),
            int(params.pop("seed", 0)),
        )
    elif kind == "piecewise":
        base = int(float(params.pop("base_ppb", 0)))
        segs = [(TimePoint.from_s(k), int(float(v))) for k, v in params.items()]
        return ClockModel.piecewise(sorted(segs), base)
    else:
        raise ValueError(f"unknown clock model {kind!r}")
    if params:
        raise ValueError(f"unknown model parameters: {sorted(params)}")
    return model


def _source(args) -> Source:
    if getattr(args, "trace", None):
        return load_trace(args.trace)
    return parse_model(args.model)


def cmd_run(args) -> int:
    levels = [NoiseLevel.parse(x) for x in args.noise.split(",") if x]
    protocols = [p for p in args.protocols.split(",") if p]
    cfg = BenchConfig(duration=parse_duration(args.duration), eval_mode=args.eval)
    report = run_comparison(_source(args), levels, protocols, runs=args.runs, seed=args.seed, config=cfg)
    text = emit_report(report, args.out, fmt=args.format)
    if not args.out:
        sys.stdout.write(text)
    return 0


def cmd_allan(args) -> int:
    trace = load_trace(args.trace)
    taus = [TimeSpan.from_s(x) for x in args.taus.split(",") if x]
    text = emit_allan(allan_deviation(trace, taus), args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def cmd_poll(args) -> int:
    policy = PollingPolicy(style=PollingStyle(args.style))
    noise = NoiseModel(TimeSpan.from_ms(args.noise_ms), seed=args.seed)
    run = simulate_spot(_source(args), noise, policy, duration=parse_duration(args.duration))
    text = emit_polling(polling_profile(run), args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spotbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compare protocols under injected noise")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace", help="ground-truth offset trace CSV")
    src.add_argument("--model", help="synthetic clock, e.g. linear:skew_ppb=20000")
    run.add_argument("--noise", default="low,medium,high", help="comma list of low|medium|high|sigma=MS")
    run.add_argument("--protocols", default=",".join(PROTOCOLS))
    run.add_argument("--runs", type=int, default=100)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--duration", default="24h", help="model runs only")
    run.add_argument("--eval", choices=("sync", "continuous"), default="sync")
    run.add_argument("--format", choices=("csv", "markdown"), default="csv")
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)

    al = sub.add_parser("allan", help="Allan deviation of an offset trace")
    al.add_argument("--trace", required=True)
    al.add_argument("--taus", default=",".join(str(1 << k) for k in range(11)), help="seconds, comma separated")
    al.add_argument("--out")
    al.set_defaults(func=cmd_allan)

    po = sub.add_parser("poll", help="polling-interval trajectory of one SPoT run")
    src = po.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace")
    src.add_argument("--model")
    po.add_argument("--style", choices=[s.value for s in PollingStyle], default="aimd")
    po.add_argument("--duration", default="24h")
    po.add_argument("--noise-ms", default="0")
    po.add_argument("--seed", type=int, default=0)
    po.add_argument("--out")
    po.set_defaults(func=cmd_poll)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValueError, TraceError, AllanError, OSError) as exc:
        print(f"spotbench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
