"""
accountant.py - Allocation accountant for scratch-memory measurements.

Kernels register every transient buffer they create through `scratch()`.
When an AllocationAccountant is active (`with AllocationAccountant() as acct`),
registered bytes are added to its running total and its peak is tracked;
when none is active, registration is a no-op.
"""

import contextvars
import logging
import threading
from contextlib import contextmanager

logger = logging.getLogger(__name__)

_active = contextvars.ContextVar("active_accountant", default=None)


class AllocationAccountant:
    """Thread-safe running total and peak of registered scratch bytes."""

    def __init__(self):
        self._lock = threading.Lock()
        self._token = None
        self.current = 0
        self.peak = 0
        self.allocations = 0

    def allocate(self, nbytes):
        with self._lock:
            self.current += nbytes
            self.allocations += 1
            if self.current > self.peak:
                self.peak = self.current

    def release(self, nbytes):
        with self._lock:
            self.current -= nbytes

    def __enter__(self):
        self._token = _active.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active.reset(self._token)
        self._token = None
        logger.debug("accountant closed: peak=%d bytes over %d allocations",
                     self.peak, self.allocations)
        return False


class Scratch:
    """Buffers held for the lifetime of one `scratch()` block."""

    def __init__(self, accountant):
        self._accountant = accountant
        self.held = 0

    def hold(self, array):
        """Register array's bytes until the enclosing block exits; returns array."""
        if self._accountant is not None:
            self._accountant.allocate(array.nbytes)
            self.held += array.nbytes
        return array

    def drop(self, array):
        """Release array's bytes early."""
        if self._accountant is not None:
            self._accountant.release(array.nbytes)
            self.held -= array.nbytes


@contextmanager
def scratch():
    """Yield a Scratch bound to the active accountant (if any)."""
    block = Scratch(_active.get())
    try:
        yield block
    finally:
        if block._accountant is not None and block.held:
            block._accountant.release(block.held)


def active():
    """The accountant currently collecting, or None."""
    return _active.get()
