"""Thick client: runs the sync algorithm locally against a stateless server."""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field
from typing import Callable

from spotsync.netnode.server import wall_clock_us
from spotsync.syncalgo import ExchangeSample, SyncState, SyncUpdate, exchange_offset, exchange_rtt, spot_step
from spotsync.timebase import TimePoint, TimeSpan
from spotsync.wire import Kind, Message, Timestamps, WireError, decode, encode


@dataclass
class ExchangeResult:
    sample: ExchangeSample
    offset: TimeSpan  # reference minus client
    rtt: TimeSpan


@dataclass
class ThickClient:
    """Blocking UDP thick client.

    ``clock`` is the device clock in microseconds; it defaults to the host
    wall clock, which makes the client share the server's reference on
    loopback.
    """

    server: tuple[str, int]
    client_id: int = 0
    clock: Callable[[], int] = wall_clock_us
    timeout: float = 1.0
    state: SyncState = field(default_factory=SyncState)
    _seq: int = 0
    _sock: socket.socket | None = field(default=None, repr=False)

    def _socket(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.settimeout(self.timeout)
            self._sock.connect(self.server)
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self) -> ThickClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def exchange(self) -> ExchangeResult:
        """One THICK_REQ/THICK_RESP round trip.

        Raises:
            TimeoutError: no matching response within ``timeout``.
        """
        sock = self._socket()
        self._seq = (self._seq + 1) & 0xFFFFFFFF
        seq = self._seq
        deadline = time.monotonic() + self.timeout
        t1 = self.clock()
        sock.send(encode(Message(Kind.THICK_REQ, self.client_id, seq, Timestamps(t1))))
        while True:
            sock.settimeout(max(1e-3, deadline - time.monotonic()))
            try:
                data = sock.recv(2048)
            except socket.timeout:
                raise TimeoutError(f"no response from {self.server}") from None
            t4 = self.clock()
            try:
                msg = decode(data)
            except WireError:
                continue
            if msg.kind == Kind.THICK_RESP and msg.seq == seq and msg.body.t1 == t1:
                break
        b = msg.body
        sample = ExchangeSample(TimePoint(t1), TimePoint(b.t2), TimePoint(b.t3), TimePoint(t4))
        return ExchangeResult(sample, exchange_offset(sample), exchange_rtt(sample))

    def sync_once(self) -> SyncUpdate:
        """Exchange and feed the result to the local sync state."""
        return spot_step(self.state, self.exchange().sample)
