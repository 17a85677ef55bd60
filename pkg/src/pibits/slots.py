"""Map/reduce slot accounting and the elastic submission policy."""

from __future__ import annotations

import enum
import random
import threading
import time
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field


class Side(str, enum.Enum):
    MAP = "map"
    REDUCE = "reduce"


class Decision(str, enum.Enum):
    SUBMIT_MAP_SIDE = "submit_map_side"
    SUBMIT_REDUCE_SIDE = "submit_reduce_side"
    WAIT = "wait"


@dataclass(frozen=True)
class SlotModel:
    """Snapshot of slot capacities and how many are free right now."""

    map_capacity: int
    reduce_capacity: int
    map_free: int
    reduce_free: int
    submit_threshold: int = 1

    def __post_init__(self):
        if not 0 <= self.map_free <= self.map_capacity:
            raise ValueError(f"map_free {self.map_free} outside [0, {self.map_capacity}]")
        if not 0 <= self.reduce_free <= self.reduce_capacity:
            raise ValueError(f"reduce_free {self.reduce_free} outside [0, {self.reduce_capacity}]")
        if self.submit_threshold < 1:
            raise ValueError("submit_threshold must be >= 1")

    def capacity(self, side: Side) -> int:
        return self.map_capacity if side is Side.MAP else self.reduce_capacity


def schedule_step(
    slots: SlotModel,
    pending,
    outstanding: int = 0,
    max_outstanding: int | None = None,
) -> Decision:
    """Decide what the controller does next.

    Map side wins whenever it has ``submit_threshold`` free slots, reduce
    side is tried second, otherwise wait.  Nothing is submitted when the
    queue is empty or ``max_outstanding`` jobs are already in flight.
    """
    if not pending:
        return Decision.WAIT
    if max_outstanding is not None and outstanding >= max_outstanding:
        return Decision.WAIT
    if slots.map_free >= slots.submit_threshold:
        return Decision.SUBMIT_MAP_SIDE
    if slots.reduce_free >= slots.submit_threshold:
        return Decision.SUBMIT_REDUCE_SIDE
    return Decision.WAIT


class NoLoad:
    """Background load of an otherwise idle cluster."""

    def __call__(self, now: float) -> tuple[int, int]:
        return 0, 0


@dataclass
class RandomLoadTrace:
    """Seeded piecewise-constant background occupancy of map/reduce slots.

    Every ``period`` seconds a new (map_busy, reduce_busy) pair is drawn
    uniformly from [0, capacity].  The sequence depends only on the seed and
    the number of elapsed periods.
    """

    map_capacity: int
    reduce_capacity: int
    seed: int = 0
    period: float = 0.05
    _rng: random.Random = field(init=False, repr=False)
    _values: list = field(init=False, repr=False)
    _start: float | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self._rng = random.Random(self.seed)
        self._values = []

    def __call__(self, now: float) -> tuple[int, int]:
        if self._start is None:
            self._start = now
        idx = int((now - self._start) / self.period)
        while len(self._values) <= idx:
            self._values.append(
                (self._rng.randint(0, self.map_capacity), self._rng.randint(0, self.reduce_capacity))
            )
        return self._values[idx]


class SlotMonitor:
    """Counts parts actually executing on each side and records the peaks.

    Workers enter :meth:`occupy` around the real computation, so the peaks
    reflect true concurrency rather than controller bookkeeping.
    """

    def __init__(self, keep_history: bool = False):
        self._lock = threading.Lock()
        self.running = {Side.MAP: 0, Side.REDUCE: 0}
        self.peak = {Side.MAP: 0, Side.REDUCE: 0}
        self.parts = {Side.MAP: 0, Side.REDUCE: 0}
        self.history: deque | None = deque(maxlen=100_000) if keep_history else None

    def _record(self, side: Side) -> None:
        if self.history is not None:
            self.history.append((time.monotonic(), side, self.running[side]))

    def enter(self, side: Side) -> None:
        with self._lock:
            self.running[side] += 1
            self.parts[side] += 1
            self.peak[side] = max(self.peak[side], self.running[side])
            self._record(side)

    def leave(self, side: Side) -> None:
        with self._lock:
            self.running[side] -= 1
            self._record(side)

    @contextmanager
    def occupy(self, side: Side):
        self.enter(side)
        try:
            yield
        finally:
            self.leave(side)
