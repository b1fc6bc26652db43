"""
Domain partitioning across ranks.

Recursive multisection cuts the domain along x, y, z, x, ... at order
statistics found with a parallel nth-element selection, so any rank count
works. A Morton-order partition is provided for comparison. Particles move
to their owners with one all-to-all exchange.
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from fmm.comm import Communicator
from fmm.errors import InvalidInputError, PayloadDecodeError
from fmm.model import ParticleSet
from fmm.tree import Box, morton_keys
from utils.logger import get_logger

# 64-bit little-endian record of one particle on the wire
BODY_DTYPE = np.dtype([
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("gx", "<f8"), ("gy", "<f8"), ("gz", "<f8"),
    ("sigma", "<f8"), ("id", "<i8"),
])


@dataclass
class Partition:
    """Box owned by one rank."""
    rank: int
    x_min: np.ndarray
    x_max: np.ndarray
    particle_count: int = 0

    @property
    def box(self):
        return Box(self.x_min, self.x_max)


# ============================================================================
# PARTICLE RECORDS
# ============================================================================

def pack_particles(particles: ParticleSet) -> bytes:
    records = np.empty(len(particles), dtype=BODY_DTYPE)
    records["x"], records["y"], records["z"] = particles.positions.T
    records["gx"], records["gy"], records["gz"] = particles.gammas.T
    records["sigma"] = particles.sigmas
    records["id"] = particles.ids
    return records.tobytes()


def unpack_particles(buffer, sender_rank=None) -> ParticleSet:
    if len(buffer) % BODY_DTYPE.itemsize:
        raise PayloadDecodeError(f"particle buffer of {len(buffer)} bytes is not a whole number of records",
                                 sender_rank)
    records = np.frombuffer(buffer, dtype=BODY_DTYPE)
    if records.size == 0:
        return ParticleSet.empty()
    positions = np.stack([records["x"], records["y"], records["z"]], axis=1)
    gammas = np.stack([records["gx"], records["gy"], records["gz"]], axis=1)
    return ParticleSet(positions, gammas, records["sigma"].copy(), records["id"].copy())


def redistribute(comm: Communicator, particles: ParticleSet, owners) -> ParticleSet:
    """Send every local particle to ``owners[i]`` with one all-to-all exchange."""
    owners = np.asarray(owners, dtype=np.int64)
    buffers = [pack_particles(particles.subset(owners == r)) for r in range(comm.size)]
    received = comm.alltoallv(buffers)
    return ParticleSet.concatenate([unpack_particles(buf, sender_rank=r) for r, buf in enumerate(received)])


# ============================================================================
# PARALLEL NTH ELEMENT
# ============================================================================

def _lex_less(values, ids, pivot_value, pivot_id):
    return (values < pivot_value) | ((values == pivot_value) & (ids < pivot_id))


def nth_element_parallel(comm: Communicator, values, ids, n: int):
    """
    Distributed selection of the element with exactly ``n`` elements before it.

    Elements are ordered by (value, id); ids must be globally unique. Each
    round picks the median of the per-rank medians as pivot, counts the
    elements below it with one allreduce and keeps one side, so no global
    sort is performed.

    Args:
        comm: communicator (collective call)
        values: local values (any orderable numpy dtype)
        ids: local unique ids
        n: global index, 0 <= n < global count

    Returns:
        tuple: (value, id) of the selected element
    """
    values = np.asarray(values)
    ids = np.asarray(ids, dtype=np.int64)
    total = int(comm.allreduce_sum(np.array([values.size], dtype=np.int64))[0])
    if total == 0:
        raise InvalidInputError("nth_element on an empty global list")
    if not 0 <= n < total:
        raise InvalidInputError(f"n={n} outside [0, {total})")

    active_v, active_id = values, ids
    while True:
        if active_v.size:
            order = np.lexsort((active_id, active_v))
            mid = order[(order.size - 1) // 2]
            candidate = (active_v[mid], int(active_id[mid]))
        else:
            candidate = None
        candidates = sorted(c for c in comm.allgather(candidate) if c is not None)
        pivot_value, pivot_id = candidates[(len(candidates) - 1) // 2]

        less = _lex_less(active_v, active_id, pivot_value, pivot_id)
        equal = (active_v == pivot_value) & (active_id == pivot_id)
        counts = comm.allreduce_sum(np.array([np.count_nonzero(less), np.count_nonzero(equal)], dtype=np.int64))
        n_less, n_equal = int(counts[0]), int(counts[1])

        if n < n_less:
            active_v, active_id = active_v[less], active_id[less]
        elif n < n_less + n_equal:
            return pivot_value, pivot_id
        else:
            n -= n_less + n_equal
            keep = ~less & ~equal
            active_v, active_id = active_v[keep], active_id[keep]


# ============================================================================
# RECURSIVE MULTISECTION
# ============================================================================

def global_bounds(comm: Communicator, particles: ParticleSet) -> Box:
    """Bounding cube of all particles on all ranks."""
    lo = particles.positions.min(axis=0) if len(particles) else np.full(3, np.inf)
    hi = particles.positions.max(axis=0) if len(particles) else np.full(3, -np.inf)
    gathered = comm.allgather((lo, hi))
    lo = np.min([g[0] for g in gathered], axis=0)
    hi = np.max([g[1] for g in gathered], axis=0)
    if not np.all(np.isfinite(lo)):
        return Box.cube(1.0)
    return Box.bounding(np.stack([lo, hi]))


def multisection(comm: Communicator, particles: ParticleSet, domain: Box = None):
    """
    Recursive multisection over all ranks of ``comm``.

    A group of P_sub ranks is cut along the current axis at the
    (floor(P_sub/2) * N_sub // P_sub)-th element; the low side takes the first
    floor(P_sub/2) ranks. Axes cycle x, y, z with depth. Groups are processed
    one after another on the full communicator, then particles move to their
    owners in a single all-to-all.

    Args:
        comm: communicator (collective call)
        particles: this rank's particles before partitioning
        domain: global box (defaults to the bounding cube of all particles)

    Returns:
        tuple: (list of Partition for every rank, redistributed local ParticleSet)
    """
    size = comm.size
    domain = domain if domain is not None else global_bounds(comm, particles)
    total = int(comm.allreduce_sum(np.array([len(particles)], dtype=np.int64))[0])
    if size > total:
        raise InvalidInputError(f"{size} ranks exceed {total} particles")

    positions = particles.positions
    ids = particles.ids
    group_of = np.zeros(len(particles), dtype=np.int64)   # first rank of the owning group
    boxes = {}
    tasks = [(0, size, domain.lo.copy(), domain.hi.copy(), 0)]
    while tasks:
        first, count, lo, hi, depth = tasks.pop(0)
        if count == 1:
            boxes[first] = (lo, hi)
            continue
        axis = depth % 3
        mine = group_of == first
        n_sub = int(comm.allreduce_sum(np.array([np.count_nonzero(mine)], dtype=np.int64))[0])
        low_ranks = count // 2
        k = low_ranks * n_sub // count
        cut_value, cut_id = nth_element_parallel(comm, positions[mine, axis], ids[mine], k)

        high = mine.copy()
        high[mine] = ~_lex_less(positions[mine, axis], ids[mine], cut_value, cut_id)
        group_of[high] = first + low_ranks

        low_hi = hi.copy()
        low_hi[axis] = cut_value
        high_lo = lo.copy()
        high_lo[axis] = cut_value
        tasks.append((first, low_ranks, lo, low_hi, depth + 1))
        tasks.append((first + low_ranks, count - low_ranks, high_lo, hi, depth + 1))

    local = redistribute(comm, particles, group_of)
    counts = comm.allgather(len(local))
    partitions = [Partition(r, boxes[r][0], boxes[r][1], int(counts[r])) for r in range(size)]
    get_logger().child("partition", comm.rank, size).debug(
        f"multisection: {len(local)} particles in box {partitions[comm.rank].x_min}..{partitions[comm.rank].x_max}")
    return partitions, local


# ============================================================================
# MORTON PARTITION
# ============================================================================

def morton_partition(comm: Communicator, particles: ParticleSet, domain: Box = None, level: int = 10):
    """
    Split the global Morton order into P equal contiguous chunks.

    Chunk boundaries come from P - 1 parallel selections on (key, id).

    Returns:
        np.ndarray: owning rank of every local particle
    """
    domain = domain if domain is not None else global_bounds(comm, particles)
    keys = morton_keys(particles.positions, domain, level) if len(particles) else np.zeros(0, dtype=np.uint64)
    total = int(comm.allreduce_sum(np.array([len(particles)], dtype=np.int64))[0])
    owners = np.zeros(len(particles), dtype=np.int64)
    for r in range(1, comm.size):
        split = r * total // comm.size
        if split >= total:
            break
        key, key_id = nth_element_parallel(comm, keys, particles.ids, split)
        owners += ~_lex_less(keys, particles.ids, key, key_id)
    return owners


def partition_boxes(comm: Communicator, particles: ParticleSet, owners) -> List[Box]:
    """Bounding boxes of the particles assigned to each rank (for overlap comparisons)."""
    owners = np.asarray(owners)
    local = []
    for r in range(comm.size):
        pos = particles.positions[owners == r]
        local.append((pos.min(axis=0), pos.max(axis=0)) if len(pos) else None)
    gathered = comm.allgather(local)
    boxes = []
    for r in range(comm.size):
        parts = [g[r] for g in gathered if g[r] is not None]
        if not parts:
            boxes.append(None)
            continue
        boxes.append(Box(np.min([p[0] for p in parts], axis=0), np.max([p[1] for p in parts], axis=0)))
    return boxes


def covering_partitions(comm: Communicator, partitions: List[Partition], particles: ParticleSet) -> List[Partition]:
    """
    Grow every partition box to cover the particles its rank currently holds.

    Particles that moved during a time step may leave the box they were
    assigned to; the LET criterion stays valid as long as each box contains
    its rank's targets.
    """
    if len(particles):
        extent = (particles.positions.min(axis=0), particles.positions.max(axis=0), len(particles))
    else:
        extent = None
    gathered = comm.allgather(extent)
    grown = []
    for part, ext in zip(partitions, gathered):
        lo, hi = np.array(part.x_min, dtype=np.float64), np.array(part.x_max, dtype=np.float64)
        count = 0
        if ext is not None:
            lo, hi, count = np.minimum(lo, ext[0]), np.maximum(hi, ext[1]), ext[2]
        grown.append(Partition(part.rank, lo, hi, int(count)))
    return grown


def assign_to_partitions(partitions: List[Partition], positions) -> np.ndarray:
    """
    Owning rank of every position under the partition boxes.

    Boxes are half-open [x_min, x_max) so a point on a shared face belongs
    to the upper box; faces on the outer boundary are closed. Points outside
    every box go to the nearest one.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    lows = np.array([p.x_min for p in partitions], dtype=np.float64)
    highs = np.array([p.x_max for p in partitions], dtype=np.float64)
    outer = highs.max(axis=0)
    owners = np.full(len(positions), -1, dtype=np.int64)
    for part, lo, hi in zip(partitions, lows, highs):
        below = (positions < hi) | ((hi >= outer) & (positions <= hi))
        inside = np.all((positions >= lo) & below, axis=1) & (owners < 0)
        owners[inside] = part.rank
    stray = np.flatnonzero(owners < 0)
    if stray.size:
        gap = np.maximum(np.maximum(lows[None] - positions[stray, None], positions[stray, None] - highs[None]), 0.0)
        owners[stray] = np.array([p.rank for p in partitions])[np.argmin(np.sum(gap * gap, axis=2), axis=1)]
    return owners
