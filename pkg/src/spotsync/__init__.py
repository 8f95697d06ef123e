"""Clock synchronization for IoT devices: asymmetry-correcting offset filter,
rate synchronization with adaptive polling, a UDP reference server, and a
trace-driven evaluation bench."""

from spotsync.timebase import ClockModel, OffsetTrace, Skew, TimePoint, TimeSpan

__all__ = ["ClockModel", "OffsetTrace", "Skew", "TimePoint", "TimeSpan"]
__version__ = "0.1.0"
