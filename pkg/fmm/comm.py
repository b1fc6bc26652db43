"""
Message-passing layer.

Ranks are in-process worker threads connected through per-rank mailboxes by
default; MpiCommunicator exposes the same interface over mpi4py. Every
blocking receive honours a timeout and reports the ranks that never
delivered.
"""

import itertools
import queue
import threading
from abc import ABC, abstractmethod
from typing import Callable, List

import numpy as np

from fmm.constants import Timeouts
from fmm.errors import CommunicationTimeoutError, InvalidInputError
from utils.logger import get_logger
from utils.wait_helper import WaitHelper


def payload_size(obj):
    """Bytes counted for the exchange accounting (binary payloads only)."""
    if isinstance(obj, (bytes, bytearray)):
        return len(obj)
    if isinstance(obj, memoryview):
        return obj.nbytes
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    return 0


class Communicator(ABC):
    """
    Rank endpoint: all-to-all variable-size exchange, point-to-point
    send/receive, allgather, sum-allreduce and barrier.
    """

    rank: int
    size: int

    def __init__(self):
        self.bytes_sent = 0
        self.messages_sent = 0

    def _account(self, obj):
        self.bytes_sent += payload_size(obj)
        self.messages_sent += 1

    @abstractmethod
    def send(self, obj, dest, tag=0):
        ...

    @abstractmethod
    def recv(self, source, tag=0):
        ...

    @abstractmethod
    def alltoallv(self, buffers: List[bytes]) -> List[bytes]:
        """buffers[d] goes to rank d; returns the buffer received from every rank."""

    @abstractmethod
    def allgather(self, obj) -> list:
        ...

    @abstractmethod
    def barrier(self):
        ...

    def allreduce_sum(self, array):
        """Element-wise sum over ranks, added in rank order."""
        parts = self.allgather(np.asarray(array))
        total = np.array(parts[0], copy=True)
        for part in parts[1:]:
            total = total + part
        return total

    @property
    def logger(self):
        return get_logger().child("comm", rank=self.rank, size=self.size)


# ============================================================================
# IN-PROCESS RANKS
# ============================================================================

class InProcessHub:
    """Shared mailboxes of one group of in-process ranks."""

    def __init__(self, size, timeout=Timeouts.RECEIVE):
        if size < 1:
            raise InvalidInputError(f"rank count must be >= 1, got {size}")
        self.size = size
        self.timeout = timeout
        self.failed = threading.Event()
        self._lock = threading.Lock()
        self._mailboxes = {}

    def mailbox(self, dest, source, tag):
        key = (dest, source, tag)
        with self._lock:
            if key not in self._mailboxes:
                self._mailboxes[key] = queue.Queue()
            return self._mailboxes[key]

    def communicator(self, rank):
        return InProcessCommunicator(self, rank)


class InProcessCommunicator(Communicator):
    """Endpoint of one in-process rank."""

    def __init__(self, hub: InProcessHub, rank: int):
        super().__init__()
        self.hub = hub
        self.rank = rank
        self.size = hub.size
        self._collective_seq = itertools.count()
        self._waiter = WaitHelper(default_timeout=hub.timeout)

    def send(self, obj, dest, tag=0):
        self._account(obj)
        self.hub.mailbox(dest, self.rank, tag).put(obj)

    def recv(self, source, tag=0):
        ok, item = self._waiter.wait_for_item(self.hub.mailbox(self.rank, source, tag), abort=self.hub.failed.is_set)
        if not ok:
            raise CommunicationTimeoutError(f"rank {self.rank}: no message from rank {source} (tag {tag!r})",
                                            stalled_ranks=[source])
        return item

    def _exchange(self, outgoing):
        tag = ("collective", next(self._collective_seq))
        for dest in range(self.size):
            if dest != self.rank:
                self.send(outgoing[dest], dest, tag)
        received = [None] * self.size
        received[self.rank] = outgoing[self.rank]
        stalled = []
        for source in range(self.size):
            if source == self.rank:
                continue
            mailbox = self.hub.mailbox(self.rank, source, tag)
            if stalled:
                # already past the deadline: only collect what has arrived
                try:
                    received[source] = mailbox.get_nowait()
                except queue.Empty:
                    stalled.append(source)
                continue
            ok, item = self._waiter.wait_for_item(mailbox, abort=self.hub.failed.is_set)
            if ok:
                received[source] = item
            else:
                stalled.append(source)
        if stalled:
            raise CommunicationTimeoutError(f"rank {self.rank}: collective {tag[1]} incomplete", stalled_ranks=stalled)
        return received

    def alltoallv(self, buffers):
        if len(buffers) != self.size:
            raise InvalidInputError(f"alltoallv needs {self.size} buffers, got {len(buffers)}")
        return self._exchange(list(buffers))

    def allgather(self, obj):
        return self._exchange([obj] * self.size)

    def barrier(self):
        self._exchange([None] * self.size)


def run_ranks(size: int, fn: Callable, timeout: float = Timeouts.RECEIVE) -> list:
    """
    Run ``fn(comm)`` on ``size`` in-process ranks and return their results.

    The first worker exception is re-raised after the other ranks have
    wound down (their pending receives abort once a failure is flagged).
    """
    hub = InProcessHub(size, timeout)
    results = [None] * size
    errors = [None] * size

    def worker(rank):
        try:
            results[rank] = fn(hub.communicator(rank))
        except BaseException as exc:  # noqa: B902 - re-raised in the caller
            errors[rank] = exc
            hub.failed.set()

    if size == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}", daemon=True) for r in range(size)]
        for t in threads:
            t.start()
        waiter = WaitHelper(default_timeout=timeout)
        waiter.custom_wait(lambda: hub.failed.is_set() or not any(t.is_alive() for t in threads),
                           timeout=float("inf"))
        if not waiter.custom_wait(lambda: not any(t.is_alive() for t in threads), timeout=timeout):
            alive = [t.name for t in threads if t.is_alive()]
            get_logger().child("comm").warning(f"ranks still running after failure: {alive}")

    failures = [e for e in errors if e is not None]
    if failures:
        # prefer the root cause over the timeouts it triggered on other ranks
        primary = next((e for e in failures if not isinstance(e, CommunicationTimeoutError)), failures[0])
        raise primary
    return results


# ============================================================================
# MPI BACKEND
# ============================================================================

class MpiCommunicator(Communicator):
    """Adapter over an mpi4py communicator (COMM_WORLD by default)."""

    def __init__(self, mpi_comm=None):
        super().__init__()
        from mpi4py import MPI

        self._comm = mpi_comm or MPI.COMM_WORLD
        self.rank = self._comm.Get_rank()
        self.size = self._comm.Get_size()

    def send(self, obj, dest, tag=0):
        self._account(obj)
        self._comm.send(obj, dest=dest, tag=tag if isinstance(tag, int) else 0)

    def recv(self, source, tag=0):
        return self._comm.recv(source=source, tag=tag if isinstance(tag, int) else 0)

    def alltoallv(self, buffers):
        if len(buffers) != self.size:
            raise InvalidInputError(f"alltoallv needs {self.size} buffers, got {len(buffers)}")
        for dest, buf in enumerate(buffers):
            if dest != self.rank:
                self._account(buf)
        return self._comm.alltoall(list(buffers))

    def allgather(self, obj):
        return self._comm.allgather(obj)

    def allreduce_sum(self, array):
        from mpi4py import MPI

        array = np.ascontiguousarray(array)
        out = np.empty_like(array)
        self._comm.Allreduce(array, out, op=MPI.SUM)
        return out

    def barrier(self):
        self._comm.Barrier()
