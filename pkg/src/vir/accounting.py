"""Logical allocation accounting.

Retention kernels report the element counts of their working buffers here.
A meter opened with :func:`metered` keeps the live count and its high-water
mark; with no meter open every call is a no-op. Counts are logical (elements
of the algorithm's state and scratch), not OS bytes, so they are identical
across repeats and platforms.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar


class AllocationMeter:
    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, count: int) -> None:
        self.live += int(count)
        if self.live > self.peak:
            self.peak = self.live

    def free(self, count: int) -> None:
        self.live -= int(count)


_current: ContextVar[AllocationMeter | None] = ContextVar("vir_meter", default=None)


def alloc(count: int) -> None:
    meter = _current.get()
    if meter is not None:
        meter.alloc(count)


def free(count: int) -> None:
    meter = _current.get()
    if meter is not None:
        meter.free(count)


@contextmanager
def metered():
    """Open a fresh meter for the current thread/context and yield it."""
    meter = AllocationMeter()
    token = _current.set(meter)
    try:
        yield meter
    finally:
        _current.reset(token)
