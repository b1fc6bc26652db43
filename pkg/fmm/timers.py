"""
Per-category wall-clock timers shared by the engine, the LET exchange and
the run drivers.
"""

import threading
import time
from contextlib import contextmanager
from typing import Dict


class Category:
    """Timing categories of the run breakdown"""
    TREE_CONSTRUCTION = "tree_construction"
    NEAR_FIELD = "near_field"
    FAR_FIELD = "far_field"
    BATCH_BUFFERING = "batch_buffering"
    VISIBLE_COMM = "visible_comm"
    PARTICLE_UPDATE = "particle_update"

    ALL = (TREE_CONSTRUCTION, NEAR_FIELD, FAR_FIELD, BATCH_BUFFERING, VISIBLE_COMM, PARTICLE_UPDATE)


class CategoryTimers:
    """
    Thread-safe accumulator of wall-clock durations per category.

    Usage:
        timers = CategoryTimers()
        with timers.measure(Category.NEAR_FIELD):
            ...
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.durations: Dict[str, float] = {name: 0.0 for name in Category.ALL}
        self.comm_total = 0.0

    @contextmanager
    def measure(self, category):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.add(category, time.perf_counter() - start)

    def add(self, category, seconds):
        with self._lock:
            self.durations[category] = self.durations.get(category, 0.0) + max(0.0, seconds)

    def add_comm(self, comm_seconds, overlapped_compute_seconds):
        """Record one exchange; only the part not hidden behind compute is visible."""
        visible = max(0.0, comm_seconds - overlapped_compute_seconds)
        with self._lock:
            self.comm_total += max(0.0, comm_seconds)
            self.durations[Category.VISIBLE_COMM] += visible
        return visible

    def merge(self, other):
        with self._lock:
            for name, seconds in other.durations.items():
                self.durations[name] = self.durations.get(name, 0.0) + seconds
            self.comm_total += other.comm_total


class NullTimers(CategoryTimers):
    """Timers that record nothing (default for library calls)."""

    @contextmanager
    def measure(self, category):
        yield

    def add(self, category, seconds):
        pass

