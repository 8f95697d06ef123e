"""Reference server: stateless thick path plus scheduler-driven thin path.

:class:`SpotServer` is transport-free: it turns datagrams into replies and
tells the caller which probes to send.  :func:`serve` wires it to an
asyncio UDP endpoint and a scheduler loop.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import socket
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from spotsync.netnode.registry import Address, ClientEntry, ClientRegistry, ProbeSchedule, RegistryFullError
from spotsync.syncalgo import (
    ExchangeSample,
    MalformedSampleError,
    NonMonotonicTimeError,
    PollingPolicy,
    PollingStyle,
    SyncState,
    SyncUpdate,
    exchange_offset,
    exchange_rtt,
    process_measurement,
)
from spotsync.timebase import US_PER_MS, US_PER_S, TimePoint, TimeSpan, format_ms
from spotsync.wire import (
    AckStatus,
    AdjustBody,
    ClientMode,
    Kind,
    Message,
    ProbeBody,
    ProbeRespBody,
    RegisterAckBody,
    RegistrationBody,
    Timestamps,
    WireError,
    WireStyle,
    decode,
    encode,
)

log = logging.getLogger(__name__)

PROBE_TIMEOUT = TimeSpan(US_PER_S)
PROBE_RETRIES = 2
MAX_FAILED_CYCLES = 3
ASSIGNED_ID_BASE = 1 << 32  # ids handed out to clients that register as 0

SERVER_LOG_HEADER = ("ref_time_ms", "client_id", "lateness_ms", "offset_ms", "skew_ppb", "next_poll_s", "quality")

Outgoing = list[tuple[bytes, Address]]


def wall_clock_us() -> int:
    """Reference time: the host's wall clock in microseconds."""
    return time.time_ns() // 1000


@dataclass(slots=True)
class _Pending:
    seq: int
    t1: int
    due: int
    attempt: int
    deadline: int


@dataclass
class ServerStats:
    thick_served: int = 0
    probes_sent: int = 0
    adjusts_sent: int = 0
    timeouts: int = 0
    evicted: int = 0
    rejected: int = 0
    bad_datagrams: int = 0
    lateness_us: list[int] = field(default_factory=list)

    def lateness_summary(self) -> dict[str, float]:
        if not self.lateness_us:
            return {"count": 0, "mean_ms": 0.0, "p99_ms": 0.0, "max_ms": 0.0}
        a = np.asarray(self.lateness_us, dtype=np.float64) / US_PER_MS
        return {
            "count": int(a.size),
            "mean_ms": float(a.mean()),
            "p99_ms": float(np.percentile(a, 99)),
            "max_ms": float(a.max()),
        }


class SpotServer:
    """Transport-free server core.

    Args:
        max_clients: registry capacity.
        clock: reference clock in microseconds.
        log_sink: optional text stream receiving one CSV row per ADJUST.
    """

    def __init__(
        self,
        max_clients: int = 100_000,
        clock: Callable[[], int] = wall_clock_us,
        probe_timeout: TimeSpan = PROBE_TIMEOUT,
        retries: int = PROBE_RETRIES,
        max_failed_cycles: int = MAX_FAILED_CYCLES,
        log_sink: TextIO | None = None,
    ) -> None:
        self.registry = ClientRegistry(capacity=max_clients)
        self.schedule = ProbeSchedule()
        self.clock = clock
        self.probe_timeout = probe_timeout.ticks
        self.retries = retries
        self.max_failed_cycles = max_failed_cycles
        self.stats = ServerStats()
        self._pending: dict[int, _Pending] = {}
        self._deadlines: deque[tuple[int, int, int]] = deque()  # (deadline, client_id, seq)
        self._seq = 0
        self._next_id = ASSIGNED_ID_BASE
        self._writer = None
        if log_sink is not None:
            self._writer = csv.writer(log_sink, lineterminator="\n")
            self._writer.writerow(SERVER_LOG_HEADER)

    # dispatch -------------------------------------------------------------

    def handle(self, data: bytes, addr: Address, recv_time: int) -> Outgoing:
        """Process one datagram received at ``recv_time``; return replies."""
        try:
            msg = decode(data)
        except WireError:
            self.stats.bad_datagrams += 1
            return []
        if msg.kind == Kind.THICK_REQ:
            resp = self.serve_thick(msg, TimePoint(recv_time), None)
            return [(encode(resp), addr)]
        if msg.kind == Kind.REGISTER:
            return [(encode(self.register_client(msg, addr, TimePoint(recv_time))), addr)]
        if msg.kind == Kind.PROBE_RESP:
            done = self.complete_probe(msg, addr, recv_time)
            return [] if done is None else [done[1]]
        self.stats.bad_datagrams += 1
        return []

    # thick path -----------------------------------------------------------

    def serve_thick(self, req: Message, recv_time: TimePoint, send_time: TimePoint | None) -> Message:
        """Echo t1 and seq, stamp t2/t3.  Touches no per-client state.

        ``send_time`` of None stamps t3 from the clock as late as possible.
        """
        t3 = self.clock() if send_time is None else send_time.ticks
        self.stats.thick_served += 1
        return Message(Kind.THICK_RESP, req.client_id, req.seq, Timestamps(req.body.t1, recv_time.ticks, t3))

    # registration ---------------------------------------------------------

    def _new_state(self, reg: RegistrationBody) -> SyncState:
        style = PollingStyle.MIMD if reg.polling_style == WireStyle.MIMD else PollingStyle.AIMD
        return SyncState(policy=PollingPolicy(style=style), error_margin=TimeSpan(reg.error_margin_us))

    def register_client(self, msg: Message, addr: Address, now: TimePoint) -> Message:
        """Create or refresh a registry entry and ack it.

        Re-registering with identical parameters keeps the sync state and the
        pending probe; a changed mode, style or margin starts afresh.  A thin
        client evicted for silence is rescheduled.
        """
        reg: RegistrationBody = msg.body
        cid = msg.client_id
        if cid == 0:
            cid = self._next_id
            self._next_id += 1
        old = self.registry.get(cid)
        thin = reg.mode == ClientMode.THIN
        keep = old is not None and old.registration == reg and not old.unresponsive
        state = None
        if thin:
            state = old.state if keep else self._new_state(reg)
        entry = ClientEntry(cid, reg, addr, now.ticks, state, 0 if not keep else old.failures)
        try:
            self.registry.upsert(entry)
        except RegistryFullError:
            self.stats.rejected += 1
            return Message(Kind.REGISTER_ACK, cid, msg.seq, RegisterAckBody(AckStatus.REGISTRY_FULL))
        first = 0
        if thin:
            if not (keep and (cid in self.schedule or cid in self._pending)):
                self._pending.pop(cid, None)
                self.schedule.schedule(cid, now.ticks + state.polling_interval.ticks)
            first = state.polling_interval.ticks // US_PER_S
        else:
            self.schedule.cancel(cid)
            self._pending.pop(cid, None)
        return Message(Kind.REGISTER_ACK, cid, msg.seq, RegisterAckBody(AckStatus.ACCEPTED, first))

    # thin path ------------------------------------------------------------

    def next_wakeup(self) -> int | None:
        """Earliest instant (us) at which a probe is due or a probe times out."""
        due = self.schedule.peek()
        while self._deadlines and self._deadline_stale(self._deadlines[0]):
            self._deadlines.popleft()
        if self._deadlines:
            dl = self._deadlines[0][0]
            due = dl if due is None else min(due, dl)
        return due

    def _deadline_stale(self, item: tuple[int, int, int]) -> bool:
        p = self._pending.get(item[1])
        return p is None or p.seq != item[2]

    def due_probes(self, now: int) -> list[tuple[int, int]]:
        """Pop every (client_id, due_us) whose probe is due."""
        return self.schedule.pop_due(now)

    def make_probe(self, client_id: int, due: int, attempt: int = 0) -> tuple[bytes, Address] | None:
        """Encode a PROBE, stamping t1 last; records lateness on first attempts."""
        entry = self.registry.get(client_id)
        if entry is None or entry.state is None:
            return None
        self._seq = (self._seq + 1) & 0xFFFFFFFF
        t1 = self.clock()
        data = encode(Message(Kind.PROBE, client_id, self._seq, ProbeBody(t1)))
        self._pending[client_id] = _Pending(self._seq, t1, due, attempt, t1 + self.probe_timeout)
        self._deadlines.append((t1 + self.probe_timeout, client_id, self._seq))
        self.stats.probes_sent += 1
        if attempt == 0:
            self.stats.lateness_us.append(t1 - due)
        return data, entry.address

    def expire(self, now: int) -> Outgoing:
        """Retry or fail probes whose timeout has passed."""
        out: Outgoing = []
        while self._deadlines and self._deadlines[0][0] <= now:
            _, cid, seq = self._deadlines.popleft()
            p = self._pending.get(cid)
            if p is None or p.seq != seq:
                continue
            self.stats.timeouts += 1
            del self._pending[cid]
            if p.attempt < self.retries:
                probe = self.make_probe(cid, p.due, p.attempt + 1)
                if probe is not None:
                    out.append(probe)
                continue
            self._fail_cycle(cid, now)
        return out

    def _fail_cycle(self, cid: int, now: int) -> None:
        entry = self.registry.get(cid)
        if entry is None or entry.state is None:
            return
        entry.failures += 1
        if entry.failures >= self.max_failed_cycles:
            entry.unresponsive = True
            self.schedule.cancel(cid)
            self.stats.evicted += 1
            log.info("client %d unresponsive after %d failed cycles", cid, entry.failures)
        else:
            self.schedule.schedule(cid, now + entry.state.polling_interval.ticks)

    def complete_probe(self, msg: Message, addr: Address, recv_time: int) -> tuple[SyncUpdate, tuple[bytes, Address]] | None:
        """Finish a server-initiated exchange and build the ADJUST.

        The server holds t1 and t4 and the client t2 and t3, so the raw
        exchange offset is client minus reference; it is negated so the
        stored offset is the correction reference minus client, the same
        quantity a thick client computes.
        """
        cid = msg.client_id
        p = self._pending.get(cid)
        entry = self.registry.get(cid)
        body: ProbeRespBody = msg.body
        if p is None or entry is None or entry.state is None or p.seq != msg.seq or p.t1 != body.t1:
            self.stats.bad_datagrams += 1
            return None
        del self._pending[cid]
        sample = ExchangeSample(TimePoint(p.t1), TimePoint(body.t2), TimePoint(body.t3), TimePoint(recv_time))
        try:
            rtt = exchange_rtt(sample)
            offset = -exchange_offset(sample)
            upd = process_measurement(entry.state, offset, rtt, TimePoint(recv_time))
        except (MalformedSampleError, NonMonotonicTimeError) as exc:
            log.debug("client %d: dropped sample: %s", cid, exc)
            self._fail_cycle(cid, recv_time)
            return None
        entry.failures = 0
        entry.last_seen = recv_time
        entry.address = addr
        next_poll = upd.next_poll_in.ticks
        self.schedule.schedule(cid, recv_time + next_poll)
        adjust = Message(
            Kind.ADJUST, cid, msg.seq, AdjustBody(upd.corrected_offset.ticks, upd.skew.ppb, next_poll // US_PER_S)
        )
        self.stats.adjusts_sent += 1
        if self._writer is not None:
            self._writer.writerow(
                (
                    format_ms(recv_time),
                    cid,
                    format_ms(p.t1 - p.due),
                    format_ms(upd.corrected_offset.ticks),
                    upd.skew.ppb,
                    next_poll // US_PER_S,
                    upd.sample_quality.value,
                )
            )
        return upd, (encode(adjust), addr)

    def run_probe_cycle(
        self, now: int, exchange: Callable[[bytes, Address], bytes | None]
    ) -> list[SyncUpdate]:
        """Synchronously probe every due client through ``exchange``.

        ``exchange`` delivers a PROBE and returns the PROBE_RESP datagram or
        None on timeout.  Each missing reply counts as one attempt; the ADJUST
        is handed back to ``exchange`` and its return value ignored.
        """
        updates = []
        for cid, due in self.due_probes(now):
            for attempt in range(self.retries + 1):
                probe = self.make_probe(cid, due, attempt)
                if probe is None:
                    break
                reply = exchange(*probe)
                if reply is None:
                    self.stats.timeouts += 1
                    self._pending.pop(cid, None)
                    continue
                try:
                    done = self.complete_probe(decode(reply), probe[1], self.clock())
                except WireError:
                    done = None
                if done is not None:
                    updates.append(done[0])
                    exchange(*done[1])
                break
            else:
                self._fail_cycle(cid, self.clock())
        return updates


# asyncio transport ------------------------------------------------------------


class _ServerProtocol(asyncio.DatagramProtocol):
    def __init__(self, core: SpotServer) -> None:
        self.core = core
        self.transport: asyncio.DatagramTransport | None = None
        self.wake = asyncio.Event()

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        recv = self.core.clock()
        scheduled = len(self.core.schedule)
        for out, dest in self.core.handle(data, addr, recv):
            self.transport.sendto(out, dest)
        if len(self.core.schedule) != scheduled:
            self.wake.set()

    def error_received(self, exc: Exception) -> None:
        log.debug("socket error: %s", exc)


MAX_SLEEP = 0.05


async def _scheduler(core: SpotServer, proto: _ServerProtocol, stop: asyncio.Event) -> None:
    while not stop.is_set():
        now = core.clock()
        for cid, due in core.due_probes(now):
            probe = core.make_probe(cid, due)
            if probe is not None:
                proto.transport.sendto(*probe)
        for data, addr in core.expire(core.clock()):
            proto.transport.sendto(data, addr)
        nxt = core.next_wakeup()
        delay = MAX_SLEEP if nxt is None else min(MAX_SLEEP, max(0.0, (nxt - core.clock()) / US_PER_S))
        proto.wake.clear()
        try:
            await asyncio.wait_for(proto.wake.wait(), timeout=delay)
        except asyncio.TimeoutError:
            pass


async def serve(
    core: SpotServer,
    host: str = "0.0.0.0",
    port: int = 3735,
    duration: float | None = None,
    stop: asyncio.Event | None = None,
    ready: Callable[[tuple], None] | None = None,
) -> SpotServer:
    """Run ``core`` on a UDP socket until ``stop`` is set or ``duration`` elapses."""
    loop = asyncio.get_running_loop()
    stop = stop or asyncio.Event()
    transport, proto = await loop.create_datagram_endpoint(lambda: _ServerProtocol(core), local_addr=(host, port))
    sock = transport.get_extra_info("socket")
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, 8 << 20)
        except OSError:
            pass
    if ready is not None:
        ready(sock.getsockname())
    if duration is not None:
        loop.call_later(duration, stop.set)
    try:
        await _scheduler(core, proto, stop)
    finally:
        transport.close()
    return core


def summary_lines(core: SpotServer) -> list[str]:
    s = core.stats
    late = s.lateness_summary()
    return [
        f"registered={len(core.registry)} scheduled={len(core.schedule)}",
        f"thick_served={s.thick_served} probes={s.probes_sent} adjusts={s.adjusts_sent} "
        f"timeouts={s.timeouts} evicted={s.evicted} rejected={s.rejected} bad={s.bad_datagrams}",
        f"lateness_ms mean={late['mean_ms']:.3f} p99={late['p99_ms']:.3f} max={late['max_ms']:.3f} n={late['count']}",
    ]
