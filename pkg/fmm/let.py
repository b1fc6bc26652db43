"""
Local essential trees.

A rank sends every other rank the part of its tree that rank needs: cells
that pass the LET acceptance test against the receiver's box go out as
multipole-only stubs, rejected leaves go out with their bodies. Payloads use
a fixed little-endian wire format and are exchanged in one all-to-all;
the exchange overlaps with the evaluation of the local tree.

Wire format
-----------
header  : u32 magic 0x4C455431, u32 version, u64 cell_count, u64 body_count,
          u32 order_p                                   (28 bytes, packed)
cells   : cell_count records of 64-bit fields
          lo[3] f8, hi[3] f8, parent i8, level i8, flags i8 (bit 0 = remote
          stub), body_begin i8, body_end i8, count i8,
          coeffs[3][p(p+1)/2][re, im] f8 (raw multipole)
bodies  : body_count records x, y, z, gx, gy, gz, sigma f8, id i8
"""

import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fmm import expansion as ex
from fmm import harmonics as hm
from fmm.comm import Communicator
from fmm.constants import WireFormat
from fmm.errors import PayloadDecodeError
from fmm.model import ParticleSet
from fmm.partition import BODY_DTYPE, Partition, pack_particles, unpack_particles
from fmm.timers import Category, NullTimers
from fmm.traversal import (MacParams, TraversalStats, add_far_local, dual_traverse, far_image_local,
                           image_offsets, mac_let)
from fmm.tree import BatchQueue, Box, Cell, Tree, downward_pass
from utils.logger import get_logger

HEADER_DTYPE = np.dtype([
    ("magic", "<u4"), ("version", "<u4"), ("cell_count", "<u8"), ("body_count", "<u8"), ("order_p", "<u4"),
])

FLAG_REMOTE = 1


def cell_dtype(p):
    """Wire record of one cell at order ``p``."""
    return np.dtype([
        ("lo", "<f8", (3,)), ("hi", "<f8", (3,)),
        ("parent", "<i8"), ("level", "<i8"), ("flags", "<i8"),
        ("body_begin", "<i8"), ("body_end", "<i8"), ("count", "<i8"),
        ("coeffs", "<f8", (3, hm.tri_size(p), 2)),
    ])


@dataclass
class LetPayload:
    """Connected top subset of a sender's tree plus the bodies of its open leaves."""
    order_p: int
    cells: np.ndarray
    bodies: ParticleSet = field(default_factory=ParticleSet.empty)

    @property
    def cell_count(self):
        return len(self.cells)

    @property
    def body_count(self):
        return len(self.bodies)

    def serialize(self) -> bytes:
        header = np.zeros(1, dtype=HEADER_DTYPE)
        header["magic"] = WireFormat.LET_MAGIC
        header["version"] = WireFormat.LET_VERSION
        header["cell_count"] = self.cell_count
        header["body_count"] = self.body_count
        header["order_p"] = self.order_p
        return header.tobytes() + self.cells.tobytes() + pack_particles(self.bodies)

    @classmethod
    def deserialize(cls, buffer, sender_rank=None):
        buffer = bytes(buffer)
        if len(buffer) < HEADER_DTYPE.itemsize:
            raise PayloadDecodeError(f"payload of {len(buffer)} bytes is shorter than the header", sender_rank)
        header = np.frombuffer(buffer, dtype=HEADER_DTYPE, count=1)[0]
        if int(header["magic"]) != WireFormat.LET_MAGIC:
            raise PayloadDecodeError(f"bad magic 0x{int(header['magic']):08X}", sender_rank)
        if int(header["version"]) != WireFormat.LET_VERSION:
            raise PayloadDecodeError(f"unsupported version {int(header['version'])}", sender_rank)
        p = int(header["order_p"])
        if p < 1:
            raise PayloadDecodeError(f"invalid order {p}", sender_rank)
        n_cells = int(header["cell_count"])
        n_bodies = int(header["body_count"])
        dtype = cell_dtype(p)
        cells_end = HEADER_DTYPE.itemsize + n_cells * dtype.itemsize
        expected = cells_end + n_bodies * BODY_DTYPE.itemsize
        if len(buffer) != expected:
            raise PayloadDecodeError(f"payload is {len(buffer)} bytes, header implies {expected}", sender_rank)
        cells = np.frombuffer(buffer, dtype=dtype, count=n_cells, offset=HEADER_DTYPE.itemsize).copy()
        if n_cells and (cells["parent"][0] != -1 or np.any(cells["parent"][1:] >= np.arange(1, n_cells))
                        or np.any(cells["parent"][1:] < 0)):
            raise PayloadDecodeError("cell records are not a connected top-down subtree", sender_rank)
        bodies = unpack_particles(buffer[cells_end:], sender_rank)
        return cls(p, cells, bodies)

    def raw_coefficients(self):
        c = self.cells["coeffs"]
        return c[..., 0] + 1j * c[..., 1]

    def to_tree(self, policy=ex.DOUBLE) -> Tree:
        """Rebuild a source tree; stubs keep ``is_remote`` and their body count."""
        cells: List[Cell] = []
        for i, rec in enumerate(self.cells):
            cell = Cell(rec["lo"], rec["hi"], int(rec["body_begin"]), int(rec["body_end"]), level=int(rec["level"]),
                        index=i, parent=int(rec["parent"]), is_remote=bool(rec["flags"] & FLAG_REMOTE),
                        body_count=int(rec["count"]))
            if cell.parent >= 0:
                cells[cell.parent].children.append(cell)
            cells.append(cell)
        tree = Tree(self.bodies, cells, np.arange(self.body_count), Box(cells[0].lo, cells[0].hi))
        tree.set_multipoles(self.raw_coefficients(), self.order_p, policy)
        return tree


# ============================================================================
# BUILD
# ============================================================================

def _let_accept(cell: Cell, box: Box, theta: float, period: Optional[float]):
    """LET acceptance; with a period the nearest image of the cell decides."""
    shifts = [None] if period is None else [None] + image_offsets(period)
    return all(mac_let(cell, box, theta, s) for s in shifts)


def build_let(local_tree: Tree, remote: Partition, theta: float, period: Optional[float] = None) -> LetPayload:
    """
    Top-down walk of ``local_tree`` against the remote partition box.

    Accepted cells are sent as multipole-only stubs; rejected interior cells
    are sent and opened; rejected leaves are sent with their bodies.
    """
    box = remote.box if isinstance(remote, Partition) else remote
    p = local_tree.order_p
    raw = local_tree.raw_multipoles()
    rows = np.zeros(len(local_tree.cells), dtype=cell_dtype(p))
    count = 0
    body_slices = []
    body_total = 0
    pending = deque([(local_tree.root, -1)])
    while pending:
        cell, parent = pending.popleft()
        index = count
        count += 1
        rows["lo"][index] = cell.lo
        rows["hi"][index] = cell.hi
        rows["parent"][index] = parent
        rows["level"][index] = cell.level
        rows["count"][index] = cell.count
        rows["coeffs"][index, ..., 0] = raw[cell.index].real
        rows["coeffs"][index, ..., 1] = raw[cell.index].imag
        if _let_accept(cell, box, theta, period):
            rows["flags"][index] = FLAG_REMOTE
        elif cell.is_leaf:
            n = cell.end - cell.begin
            rows["body_begin"][index] = body_total
            rows["body_end"][index] = body_total + n
            body_slices.append(slice(cell.begin, cell.end))
            body_total += n
        else:
            for child in cell.children:
                pending.append((child, index))

    cells = rows[:count].copy()
    if body_slices:
        bodies = ParticleSet.concatenate([local_tree.particles.subset(s) for s in body_slices])
    else:
        bodies = ParticleSet.empty()
    return LetPayload(p, cells, bodies)


# ============================================================================
# EXCHANGE
# ============================================================================

@dataclass
class LocalEssentialTree:
    """The local tree plus the fragments received from every other rank."""
    local_root: Tree
    remote_roots: List[Tree] = field(default_factory=list)
    bytes_received: int = 0

    @property
    def source_trees(self):
        return [self.local_root] + self.remote_roots


def exchange_let(comm: Communicator, local_tree: Tree, partitions: List[Partition], theta: float,
                 period: Optional[float] = None, policy=ex.DOUBLE) -> LocalEssentialTree:
    """
    Build a payload for every other rank and exchange all of them at once.

    Raises:
        PayloadDecodeError: a received payload is malformed (names the sender)
    """
    if comm.size == 1:
        return LocalEssentialTree(local_tree)
    buffers = []
    for r in range(comm.size):
        if r == comm.rank or len(local_tree.particles) == 0:
            buffers.append(b"")
        else:
            buffers.append(build_let(local_tree, partitions[r], theta, period).serialize())
    received = comm.alltoallv(buffers)
    fragments = []
    size = 0
    for r, buf in enumerate(received):
        if r == comm.rank or not buf:
            continue
        size += len(buf)
        fragments.append(LetPayload.deserialize(buf, sender_rank=r).to_tree(policy))
    get_logger().child("let", comm.rank, comm.size).debug(
        f"received {len(fragments)} LET fragments, {size} bytes")
    return LocalEssentialTree(local_tree, fragments, size)


def full_tree_bytes(tree: Tree) -> int:
    """Size of a payload holding the whole tree with every body (broadcast baseline)."""
    p = tree.order_p
    return (HEADER_DTYPE.itemsize + len(tree.cells) * cell_dtype(p).itemsize
            + len(tree.particles) * BODY_DTYPE.itemsize)


# ============================================================================
# OVERLAPPED EVALUATION
# ============================================================================

@dataclass
class OverlapTiming:
    comm_seconds: float = 0.0
    compute_seconds: float = 0.0
    visible_comm: float = 0.0


def _traverse_source(target_tree, source_tree, mac, queue, stats, period):
    dual_traverse(target_tree, source_tree, mac, queue, stats)
    if period is not None:
        for offset in image_offsets(period):
            dual_traverse(target_tree, source_tree, mac, queue, stats, offset=offset)


def global_root_multipole(comm: Communicator, local_tree: Tree, domain_center):
    """Sum over ranks of the root multipoles, shifted to the domain center."""
    root = local_tree.root
    raw = local_tree.raw_multipoles()[root.index]
    offset = root.center - np.asarray(domain_center, dtype=np.float64)
    if np.any(offset):
        raw = ex.m2m_raw_batch(raw[None], offset[None], local_tree.order_p)[0]
    return comm.allreduce_sum(raw)


def evaluate_overlapped(comm: Communicator, local_tree: Tree, partitions: List[Partition], mac: MacParams,
                        queue: BatchQueue, timers=None, overlap: bool = True, period: Optional[float] = None,
                        shells: int = 0, domain_center=None, stats: TraversalStats = None):
    """
    Evaluate the local targets against all sources with the LET exchange
    running alongside the local-tree work.

    The local tree must have had its upward pass. Visible communication is
    max(0, exchange span - concurrent compute span).

    Returns:
        tuple: (ParticleResult in the local tree's input order, OverlapTiming, LocalEssentialTree)
    """
    timers = timers or NullTimers()
    stats = stats if stats is not None else TraversalStats()
    logger = get_logger().child("let", comm.rank, comm.size)
    periodic = period if shells >= 1 else None
    outcome = {}

    def exchange():
        start = time.perf_counter()
        try:
            outcome["let"] = exchange_let(comm, local_tree, partitions, mac.theta, periodic, local_tree.policy)
        except BaseException as exc:  # noqa: B902 - re-raised on the main thread
            outcome["error"] = exc
        outcome["seconds"] = time.perf_counter() - start

    def compute_local():
        start = time.perf_counter()
        _traverse_source(local_tree, local_tree, mac, queue, stats, periodic)
        queue.flush()
        return time.perf_counter() - start

    timing = OverlapTiming()
    if overlap and comm.size > 1:
        worker = threading.Thread(target=exchange, name=f"let-exchange-{comm.rank}", daemon=True)
        worker.start()
        timing.compute_seconds = compute_local()
        worker.join()
        hidden = timing.compute_seconds
    else:
        exchange()
        timing.compute_seconds = compute_local()
        hidden = 0.0
    if "error" in outcome:
        raise outcome["error"]
    timing.comm_seconds = outcome["seconds"] if comm.size > 1 else 0.0
    timing.visible_comm = timers.add_comm(timing.comm_seconds, hidden)

    let = outcome["let"]
    for fragment in let.remote_roots:
        _traverse_source(local_tree, fragment, mac, queue, stats, periodic)
    queue.flush()

    if periodic is not None and shells >= 2:
        center = np.zeros(3) if domain_center is None else domain_center
        root_multipole = global_root_multipole(comm, local_tree, center)
        add_far_local(local_tree, far_image_local(root_multipole, shells, period, local_tree.order_p), center)

    with timers.measure(Category.FAR_FIELD):
        downward_pass(local_tree)
    if stats.fallback_m2l:
        logger.warning(f"{stats.fallback_m2l} M2L fallbacks on remote stubs")
    logger.debug(f"comm {timing.comm_seconds:.4f}s, compute {timing.compute_seconds:.4f}s, "
                 f"visible {timing.visible_comm:.4f}s")
    return local_tree.input_order_result(), timing, let
