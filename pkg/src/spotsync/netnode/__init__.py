"""UDP reference server, thick client and thin-client emulator."""

from spotsync.netnode.client import ThickClient
from spotsync.netnode.emulator import EmulatedClock, EmulationResult, Emulator, emulate_clients
from spotsync.netnode.registry import ClientEntry, ClientRegistry, ProbeSchedule
from spotsync.netnode.server import SpotServer, serve

__all__ = [
    "ClientEntry",
    "ClientRegistry",
    "EmulatedClock",
    "EmulationResult",
    "Emulator",
    "ProbeSchedule",
    "SpotServer",
    "ThickClient",
    "emulate_clients",
    "serve",
]
