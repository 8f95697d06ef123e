"""``spotd``: run the reference server, the thin-client emulator, or a one-shot query."""

from __future__ import annotations

import argparse
import asyncio
import contextlib
import logging
import signal
import sys
from typing import Sequence

from spotsync.netnode.client import ThickClient
from spotsync.netnode.emulator import emulate_clients
from spotsync.netnode.server import SpotServer, serve, summary_lines
from spotsync.timebase import format_ms
from spotsync.wire import DEFAULT_PORT, WireStyle


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, DEFAULT_PORT
    return host or "127.0.0.1", int(port)


def _open_log(path: str | None):
    if not path:
        return contextlib.nullcontext(None)
    return open(path, "w", newline="", buffering=1 << 16)


def cmd_serve(args) -> int:
    with _open_log(args.log) as sink:
        core = SpotServer(max_clients=args.max_clients, log_sink=sink)

        async def main() -> None:
            stop = asyncio.Event()
            loop = asyncio.get_running_loop()
            for sig in (signal.SIGINT, signal.SIGTERM):
                with contextlib.suppress(NotImplementedError):
                    loop.add_signal_handler(sig, stop.set)

            def ready(addr) -> None:
                print(f"listening on {addr[0]}:{addr[1]}", file=sys.stderr, flush=True)

            await serve(core, args.host, args.port, duration=args.duration, stop=stop, ready=ready)

        asyncio.run(main())
    for line in summary_lines(core):
        print(line, flush=True)
    return 0


def cmd_emulate(args) -> int:
    with _open_log(args.log) as sink:
        result = emulate_clients(
            args.clients,
            parse_hostport(args.server),
            args.duration,
            skew_ppb=args.clock_skew_ppb,
            phase_spread_ms=args.phase_spread_ms,
            ramp=args.ramp,
            seed=args.seed,
            log_sink=sink,
            style=WireStyle[args.style.upper()],
            per_socket=args.per_socket,
        )
    print(result.summary(), flush=True)
    if result.achieved < result.requested:
        print(f"spotd: socket exhaustion, achieved {result.achieved} of {result.requested} clients", file=sys.stderr)
        return 1
    return 0


def cmd_query(args) -> int:
    with ThickClient(parse_hostport(args.server), timeout=args.timeout) as client:
        for _ in range(args.count):
            r = client.exchange()
            print(f"offset_ms={format_ms(r.offset.ticks)} rtt_ms={format_ms(r.rtt.ticks)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spotd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the UDP reference server")
    s.add_argument("--host", default="0.0.0.0")
    s.add_argument("--port", type=int, default=DEFAULT_PORT)
    s.add_argument("--max-clients", type=int, default=100_000)
    s.add_argument("--duration", type=float, help="stop after this many seconds")
    s.add_argument("--log", help="CSV with one row per ADJUST, including probe lateness")
    s.set_defaults(func=cmd_serve)

    e = sub.add_parser("emulate", help="run emulated thin clients against a server")
    e.add_argument("--server", required=True, help="HOST:PORT")
    e.add_argument("--clients", type=int, default=1)
    e.add_argument("--clock-skew-ppb", type=int, default=0)
    e.add_argument("--phase-spread-ms", type=float, default=500.0)
    e.add_argument("--duration", type=float, default=60.0, help="seconds")
    e.add_argument("--ramp", type=float, help="seconds over which registrations are spread")
    e.add_argument("--style", choices=("aimd", "mimd"), default="aimd")
    e.add_argument("--per-socket", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--log", help="CSV: ref_time_ms,client_id,true_offset_ms,adopted_offset_ms,error_ms")
    e.set_defaults(func=cmd_emulate)

    q = sub.add_parser("query", help="one-shot thick-client exchanges")
    q.add_argument("--server", required=True, help="HOST:PORT")
    q.add_argument("--count", type=int, default=1)
    q.add_argument("--timeout", type=float, default=1.0)
    q.set_defaults(func=cmd_query)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, TimeoutError) as exc:
        print(f"spotd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
