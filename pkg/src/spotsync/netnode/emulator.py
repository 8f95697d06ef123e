"""Thin-client emulator: many simulated clocks behind a few UDP sockets."""

from __future__ import annotations

import asyncio
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from spotsync.netnode.server import wall_clock_us
from spotsync.syncalgo import DEFAULT_ERROR_MARGIN
from spotsync.timebase import PPB, format_ms, round_div
from spotsync.wire import (
    AckStatus,
    ClientMode,
    Kind,
    Message,
    ProbeRespBody,
    RegistrationBody,
    WireError,
    WireStyle,
    decode,
    encode,
)

log = logging.getLogger(__name__)

EMULATOR_LOG_HEADER = ("ref_time_ms", "client_id", "true_offset_ms", "adopted_offset_ms", "error_ms")
CLIENTS_PER_SOCKET = 100
REGISTER_RETRY = 1.0  # s
REGISTER_ATTEMPTS = 5


@dataclass(frozen=True, slots=True)
class EmulatedClock:
    """Device clock: ``phase_us`` ahead of reference at ``epoch_us``, running
    ``skew_ppb`` fast."""

    phase_us: int = 0
    skew_ppb: int = 0
    epoch_us: int = 0

    def offset(self, ref_us: int) -> int:
        return self.phase_us + round_div(self.skew_ppb * (ref_us - self.epoch_us), PPB)

    def read(self, ref_us: int) -> int:
        return ref_us + self.offset(ref_us)


@dataclass(slots=True, eq=False)
class ThinClient:
    client_id: int
    clock: EmulatedClock
    registered: bool = False
    rejected: bool = False
    adjusts: int = 0
    sq_error: float = 0.0  # us^2, summed over ADJUSTs


@dataclass
class EmulationResult:
    requested: int
    achieved: int  # clients that got a socket
    registered: int
    rejected: int
    adjusts: int
    per_client_rmse_ms: dict[int, float] = field(default_factory=dict)

    @property
    def mean_rmse_ms(self) -> float:
        vals = list(self.per_client_rmse_ms.values())
        return float(np.mean(vals)) if vals else math.nan

    def summary(self) -> str:
        return (
            f"requested={self.requested} achieved={self.achieved} registered={self.registered} "
            f"rejected={self.rejected} adjusts={self.adjusts} clients_adjusted={len(self.per_client_rmse_ms)} "
            f"mean_rmse_ms={self.mean_rmse_ms:.3f}"
        )


class _Shard(asyncio.DatagramProtocol):
    def __init__(self, emu: Emulator, clients: dict[int, ThinClient]) -> None:
        self.emu = emu
        self.clients = clients
        self.transport: asyncio.DatagramTransport | None = None

    def connection_made(self, transport) -> None:
        self.transport = transport

    def error_received(self, exc: Exception) -> None:
        log.debug("shard socket error: %s", exc)

    def datagram_received(self, data: bytes, addr) -> None:
        recv = self.emu.clock()
        try:
            msg = decode(data)
        except WireError:
            return
        c = self.clients.get(msg.client_id)
        if c is None:
            return
        if msg.kind == Kind.PROBE:
            t2 = c.clock.read(recv)
            body = ProbeRespBody(msg.body.t1, t2, c.clock.read(self.emu.clock()))
            self.transport.sendto(encode(Message(Kind.PROBE_RESP, c.client_id, msg.seq, body)))
        elif msg.kind == Kind.ADJUST:
            self.emu.on_adjust(c, msg.body.offset_us, recv)
        elif msg.kind == Kind.REGISTER_ACK:
            c.registered = msg.body.status == AckStatus.ACCEPTED
            c.rejected = msg.body.status == AckStatus.REGISTRY_FULL


class Emulator:
    """Registers ``clocks`` as thin clients of ``server`` and answers probes.

    Clients are spread over sockets of ``per_socket`` clients each.  Every
    ADJUST is logged: the adopted offset is the negated correction the server
    sent, so the logged error is true minus adopted device offset.
    """

    def __init__(
        self,
        server: tuple[str, int],
        clocks: list[EmulatedClock],
        style: WireStyle = WireStyle.AIMD,
        error_margin_us: int = DEFAULT_ERROR_MARGIN.ticks,
        per_socket: int = CLIENTS_PER_SOCKET,
        first_id: int = 1,
        clock: Callable[[], int] = wall_clock_us,
        log_sink: TextIO | None = None,
    ) -> None:
        if not clocks:
            raise ValueError("need at least one client")
        self.server = server
        self.clients = [ThinClient(first_id + i, ck) for i, ck in enumerate(clocks)]
        self.style = style
        self.error_margin_us = error_margin_us
        self.per_socket = per_socket
        self.clock = clock
        self._shards: list[tuple[_Shard, list[ThinClient]]] = []
        self._writer = None
        if log_sink is not None:
            self._writer = csv.writer(log_sink, lineterminator="\n")
            self._writer.writerow(EMULATOR_LOG_HEADER)

    def on_adjust(self, c: ThinClient, correction_us: int, now: int) -> None:
        true = c.clock.offset(now)
        adopted = -correction_us
        err = true - adopted
        c.adjusts += 1
        c.sq_error += float(err) * err
        if self._writer is not None:
            self._writer.writerow((format_ms(now), c.client_id, format_ms(true), format_ms(adopted), format_ms(err)))

    async def _open(self) -> int:
        loop = asyncio.get_running_loop()
        for start in range(0, len(self.clients), self.per_socket):
            group = self.clients[start : start + self.per_socket]
            try:
                _, proto = await loop.create_datagram_endpoint(
                    lambda g=group: _Shard(self, {c.client_id: c for c in g}), remote_addr=self.server
                )
            except OSError as exc:
                log.warning("socket exhaustion after %d clients: %s", start, exc)
                break
            self._shards.append((proto, group))
        return sum(len(g) for _, g in self._shards)

    def _register(self, proto: _Shard, c: ThinClient) -> None:
        body = RegistrationBody(ClientMode.THIN, self.style, self.error_margin_us)
        proto.transport.sendto(encode(Message(Kind.REGISTER, c.client_id, 0, body)))

    async def _ramp(self, ramp: float) -> None:
        pairs = [(p, c) for p, g in self._shards for c in g]
        gap = ramp / len(pairs) if pairs else 0.0
        t0 = asyncio.get_running_loop().time()
        for i, (p, c) in enumerate(pairs):
            self._register(p, c)
            wait = t0 + (i + 1) * gap - asyncio.get_running_loop().time()
            if wait > 0:
                await asyncio.sleep(wait)
            elif i % 64 == 63:
                await asyncio.sleep(0)
        for _ in range(REGISTER_ATTEMPTS - 1):
            await asyncio.sleep(REGISTER_RETRY)
            missing = [(p, c) for p, c in pairs if not (c.registered or c.rejected)]
            if not missing:
                break
            log.info("re-registering %d clients", len(missing))
            for k, (p, c) in enumerate(missing):
                self._register(p, c)
                if k % 64 == 63:
                    await asyncio.sleep(0)

    async def run(self, duration: float, ramp: float = 0.0) -> EmulationResult:
        achieved = await self._open()
        try:
            if achieved:
                loop = asyncio.get_running_loop()
                end = loop.time() + duration
                await self._ramp(min(ramp, duration))
                await asyncio.sleep(max(0.0, end - loop.time()))
        finally:
            for p, _ in self._shards:
                p.transport.close()
        active = [c for _, g in self._shards for c in g]
        return EmulationResult(
            requested=len(self.clients),
            achieved=achieved,
            registered=sum(c.registered for c in active),
            rejected=sum(c.rejected for c in active),
            adjusts=sum(c.adjusts for c in active),
            per_client_rmse_ms={
                c.client_id: math.sqrt(c.sq_error / c.adjusts) / 1000 for c in active if c.adjusts
            },
        )


def make_clocks(
    n: int, skew_ppb: int = 0, phase_spread_ms: float = 0.0, seed: int = 0, epoch_us: int | None = None
) -> list[EmulatedClock]:
    """``n`` clocks sharing ``skew_ppb`` with phases uniform in +/-``phase_spread_ms``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    phases = np.round(rng.uniform(-phase_spread_ms, phase_spread_ms, n) * 1000).astype(np.int64)
    epoch = wall_clock_us() if epoch_us is None else epoch_us
    return [EmulatedClock(int(p), skew_ppb, epoch) for p in phases]


def emulate_clients(
    n: int,
    server: tuple[str, int],
    duration: float,
    skew_ppb: int = 0,
    phase_spread_ms: float = 500.0,
    ramp: float | None = None,
    seed: int = 0,
    log_sink: TextIO | None = None,
    **kw,
) -> EmulationResult:
    """Blocking helper: run ``n`` emulated thin clients for ``duration`` seconds."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if ramp is None:
        ramp = min(30.0, n / 500)
    emu = Emulator(server, make_clocks(n, skew_ppb, phase_spread_ms, seed), log_sink=log_sink, **kw)
    return asyncio.run(emu.run(duration, ramp))


__all__ = ["EmulatedClock", "EmulationResult", "Emulator", "ThinClient", "emulate_clients", "make_clocks"]
