"""Per-worker clocks and the data-parallel chunk runner.

Two clock kinds are provided:

``WallClock``
    Monotonic wall time.  Meaningful when every worker thread has a core of its own.

``VirtualClock``
    Emulated dedicated-core time for oversubscribed machines.  A worker's clock
    advances by the CPU time its own thread consumes; receiving a message moves it
    forward to the sender's timestamp if that is later (the receiver had to wait);
    a data-parallel region advances it by the slowest chunk's CPU time.  The result
    is the critical-path time the run would take if each worker, and each of its
    threads, ran on its own core.  Throttle delays are added to the clock instead
    of being slept.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

CLOCK_KINDS = ("wall", "virtual")


class WallClock:
    kind = "wall"

    def __init__(self) -> None:
        self._t0 = time.perf_counter()

    def reset(self) -> None:
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self._t0

    def cpu(self) -> float:
        return time.perf_counter()

    def delay(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def observe(self, stamp: float) -> None:
        pass

    def parallel(self, chunk_seconds: Sequence[float]) -> None:
        pass


class VirtualClock:
    kind = "virtual"

    def __init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        # must be called from the owning thread: thread_time is per thread
        self._offset = 0.0
        self._t0 = time.thread_time()

    def now(self) -> float:
        return self._offset + (time.thread_time() - self._t0)

    def cpu(self) -> float:
        return time.thread_time()

    def delay(self, seconds: float) -> None:
        if seconds > 0:
            self._offset += seconds

    def observe(self, stamp: float) -> None:
        lag = stamp - self.now()
        if lag > 0:
            self._offset += lag

    def parallel(self, chunk_seconds: Sequence[float]) -> None:
        if chunk_seconds:
            self._offset += max(chunk_seconds)

    def parallel_inline(self, chunk_seconds: Sequence[float]) -> None:
        """Like ``parallel`` for chunks that already ran on the owning thread: only
        the slowest one stays on the clock."""
        if chunk_seconds:
            self._offset -= sum(chunk_seconds) - max(chunk_seconds)


class CpuGate:
    """Lets one worker thread of an in-process run compute at a time.

    Workers hold the gate while running and give it up only while blocked on a
    receive.  On an oversubscribed machine this stops workers from time-slicing
    against each other, which would otherwise inflate every worker's CPU time
    through cache interference.  Virtual clocks make the serialization invisible
    in the reported timings.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()

    def acquire(self) -> None:
        self._lock.acquire()

    def release(self) -> None:
        self._lock.release()


def make_clock(kind: str):
    if kind == "wall":
        return WallClock()
    if kind == "virtual":
        return VirtualClock()
    raise ValueError(f"unknown clock kind {kind!r}; expected one of {CLOCK_KINDS}")


def split_range(n: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ``[a, b)`` pieces covering ``range(n)``; never returns empty pieces
    unless ``n == 0``."""
    parts = max(1, min(parts, n)) if n else 1
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(parts)]


class ChunkRunner:
    """Runs independent chunks on ``threads`` threads.

    With a virtual clock the caller's clock is charged the slowest chunk's CPU time,
    which models one core per thread.  The chunks then run one after another on the
    calling thread: the machine is oversubscribed anyway, and pool threads would
    only time-slice and inflate each other's CPU time.
    """

    def __init__(self, threads: int = 1, clock=None) -> None:
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        self.threads = threads
        self.clock = clock
        self._inline = getattr(clock, "kind", None) == "virtual"
        use_pool = threads > 1 and not self._inline
        self._pool = ThreadPoolExecutor(threads, thread_name_prefix="chunk") if use_pool else None

    def map(self, fn: Callable[[int, int], T], n: int) -> list[T]:
        pieces = split_range(n, self.threads)
        if len(pieces) == 1:
            return [fn(a, b) for a, b in pieces]
        if self._inline:
            outs, cpus = [], []
            for a, b in pieces:
                t0 = time.thread_time()
                outs.append(fn(a, b))
                cpus.append(time.thread_time() - t0)
            self.clock.parallel_inline(cpus)
            return outs
        if self._pool is None:
            return [fn(a, b) for a, b in pieces]

        def timed(piece):
            t0 = time.thread_time()
            out = fn(*piece)
            return out, time.thread_time() - t0

        results = list(self._pool.map(timed, pieces))
        if self.clock is not None:
            self.clock.parallel([cpu for _, cpu in results])
        return [out for out, _ in results]

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


SERIAL = ChunkRunner(1)
