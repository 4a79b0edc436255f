"""Monotonic clocks with optional simulated delay injection.

All timestamps in this package come from one of these clocks, never from
wall-clock time, so latency arithmetic is immune to clock adjustments.
``SimulatedClock`` lets benchmarks inject network and serving delays as
instantaneous offset bumps: measured spans still include real compute time,
but injected seconds cost nothing to run.
"""

from __future__ import annotations

import time


class MonotonicClock:
    """Real time: ``now`` is the monotonic clock and ``sleep`` really sleeps."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimulatedClock(MonotonicClock):
    """Monotonic time plus an offset that grows instead of sleeping.

    ``now()`` returns real monotonic time plus the accumulated injected
    offset, so spans measured across a ``sleep`` include the injected
    duration exactly while the process never blocks.
    """

    def __init__(self) -> None:
        self._offset = 0.0

    def now(self) -> float:
        return time.monotonic() + self._offset

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._offset += seconds

    @property
    def injected_seconds(self) -> float:
        return self._offset


def make_clock(real_sleeps: bool) -> MonotonicClock:
    return MonotonicClock() if real_sleeps else SimulatedClock()
