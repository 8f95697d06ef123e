"""Client registry and the thin-client probe schedule."""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field
from typing import Any, Iterator

from spotsync.syncalgo import SyncState
from spotsync.wire import ClientMode, RegistrationBody

Address = Any  # whatever the transport hands us, usually (host, port)


class RegistryFullError(RuntimeError):
    pass


@dataclass(slots=True, eq=False)
class ClientEntry:
    client_id: int
    registration: RegistrationBody
    address: Address
    last_seen: int  # us, reference time
    state: SyncState | None = None
    failures: int = 0  # consecutive failed probe cycles
    unresponsive: bool = False

    @property
    def thin(self) -> bool:
        return self.registration.mode == ClientMode.THIN


@dataclass
class ClientRegistry:
    """client_id -> :class:`ClientEntry`; thin entries always carry a state.

    Lookups are plain dict reads; mutations take ``lock``.
    """

    capacity: int = 100_000
    _entries: dict[int, ClientEntry] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, client_id: int) -> bool:
        return client_id in self._entries

    def __iter__(self) -> Iterator[ClientEntry]:
        return iter(list(self._entries.values()))

    def get(self, client_id: int) -> ClientEntry | None:
        return self._entries.get(client_id)

    def upsert(self, entry: ClientEntry) -> ClientEntry:
        with self.lock:
            if entry.client_id not in self._entries and len(self._entries) >= self.capacity:
                raise RegistryFullError(f"registry holds {self.capacity} clients")
            if entry.thin != (entry.state is not None):
                raise ValueError("thin entries need a SyncState and thick entries must not have one")
            self._entries[entry.client_id] = entry
            return entry

    def remove(self, client_id: int) -> ClientEntry | None:
        with self.lock:
            return self._entries.pop(client_id, None)

    def snapshot(self) -> dict[int, tuple]:
        """Comparable view of the registry used to check that reads leave it untouched."""
        return {
            cid: (e.registration, e.address, e.last_seen, e.failures, e.unresponsive, None if e.state is None else id(e.state))
            for cid, e in self._entries.items()
        }


class ProbeSchedule:
    """Min-heap of (due_us, client_id) with lazy deletion.

    Each scheduled client has exactly one live entry; rescheduling or
    cancelling invalidates the old heap item through a generation token.
    """

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, int]] = []
        self._live: dict[int, tuple[int, int]] = {}  # client_id -> (generation, due)
        self._gen = 0

    def __len__(self) -> int:
        return len(self._live)

    def __contains__(self, client_id: int) -> bool:
        return client_id in self._live

    def due_time(self, client_id: int) -> int | None:
        item = self._live.get(client_id)
        return None if item is None else item[1]

    def schedule(self, client_id: int, due_us: int) -> None:
        self._gen += 1
        self._live[client_id] = (self._gen, due_us)
        heapq.heappush(self._heap, (due_us, self._gen, client_id))
        if len(self._heap) > 2 * len(self._live) + 1024:
            self._compact()

    def cancel(self, client_id: int) -> None:
        self._live.pop(client_id, None)

    def _stale(self, item: tuple[int, int, int]) -> bool:
        live = self._live.get(item[2])
        return live is None or live[0] != item[1]

    def peek(self) -> int | None:
        """Earliest live due time, or None when nothing is scheduled."""
        while self._heap and self._stale(self._heap[0]):
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def pop_due(self, now_us: int) -> list[tuple[int, int]]:
        """Remove and return (client_id, due_us) for every entry due by ``now_us``."""
        out = []
        while self._heap and self._heap[0][0] <= now_us:
            item = heapq.heappop(self._heap)
            if not self._stale(item):
                del self._live[item[2]]
                out.append((item[2], item[0]))
        return out

    def _compact(self) -> None:
        self._heap = [(due, gen, cid) for cid, (gen, due) in self._live.items()]
        heapq.heapify(self._heap)
