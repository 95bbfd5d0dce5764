"""Time sources.  Every party reads time through one of these so simulations
can drive a shared virtual clock."""

import threading
import time


class SystemClock:
    def __call__(self) -> float:
        return time.time()


class VirtualClock:
    def __init__(self, start: float = 1_750_000_000.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("virtual time only moves forward")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, when: float) -> None:
        with self._lock:
            if when < self._now:
                raise ValueError("virtual time only moves forward")
            self._now = float(when)
