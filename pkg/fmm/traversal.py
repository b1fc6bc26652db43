"""
Dual tree traversal, the multipole acceptance criteria and periodic images.

The traversal walks target and source trees together from an explicit
stack, always splitting the cell with the larger radius, and emits P2P and
M2L items into a BatchQueue. Periodic sources are handled by traversing
against offset copies of the source tree for the first image shell and by
aggregated super-cell multipoles for the outer shells.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from fmm import expansion as ex
from fmm.constants import EngineDefaults, MacKind
from fmm.errors import InvalidInputError
from fmm.tree import BatchQueue, Box, Cell, Tree
from utils.logger import get_logger


@dataclass(frozen=True)
class MacParams:
    """Opening angle and criterion kind."""
    theta: float = EngineDefaults.THETA
    kind: str = MacKind.FMM

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise InvalidInputError(f"theta must be in (0, 1), got {self.theta}")
        if self.kind not in MacKind.ALL:
            raise InvalidInputError(f"unknown MAC kind {self.kind!r}; expected one of {MacKind.ALL}")


@dataclass
class TraversalStats:
    """Work item counters of one traversal (cell pairs, not particle pairs)."""
    p2p_pairs: int = 0
    m2l_pairs: int = 0
    fallback_m2l: int = 0
    periodic_m2l: int = 0

    def merge(self, other):
        self.p2p_pairs += other.p2p_pairs
        self.m2l_pairs += other.m2l_pairs
        self.fallback_m2l += other.fallback_m2l
        self.periodic_m2l += other.periodic_m2l
        return self


# ============================================================================
# ACCEPTANCE CRITERIA
# ============================================================================

def _distance(target_center, source_center, offset=None):
    d = np.asarray(target_center, dtype=np.float64) - np.asarray(source_center, dtype=np.float64)
    if offset is not None:
        d = d - offset
    return float(np.sqrt(d @ d))


def mac_accept(target: Cell, source: Cell, theta: float, kind: str = MacKind.FMM, offset=None) -> bool:
    """
    Cell-cell acceptance with L = 2 * radius and R the center distance.

    FMM: (L_i + L_j) / R < theta.  Barnes-Hut: L_j / R < theta.
    LET: the source is tested against the target's box (see mac_let).
    Coincident centers are never separated.
    """
    if kind == MacKind.LET:
        shifted = source.center if offset is None else source.center + offset
        return _mac_let_center(shifted, source.radius, target.bounds, theta)
    R = _distance(target.center, source.center, offset)
    if R == 0.0:
        return False
    size_j = 2.0 * source.radius
    if kind == MacKind.BARNES_HUT:
        return size_j / R < theta
    return (2.0 * target.radius + size_j) / R < theta


def box_distance(point, box: Box) -> float:
    """Distance from ``point`` to the nearest point of ``box`` (0 inside)."""
    x = np.asarray(point, dtype=np.float64)
    dx = (x > box.hi) * (x - box.hi) + (x < box.lo) * (x - box.lo)
    return float(np.sqrt(dx @ dx))


def _mac_let_center(center, radius, box, theta):
    R = box_distance(center, box)
    if R == 0.0:
        return False
    return 2.0 * (2.0 * radius) / R < theta


def mac_let(source: Cell, partition: Box, theta: float, offset=None) -> bool:
    """
    LET acceptance of ``source`` for a remote partition box: 2 L_j / R < theta
    with R measured from the cell center to the nearest edge of the box.
    """
    center = source.center if offset is None else source.center + np.asarray(offset, dtype=np.float64)
    return _mac_let_center(center, source.radius, partition, theta)


# ============================================================================
# DUAL TRAVERSAL
# ============================================================================

def interact(A: Cell, B: Cell, mac: MacParams, queue: BatchQueue, stats: TraversalStats, stack: list,
             source_tree: Tree, offset=None):
    """
    Classify one (target A, source B) pair.

    Accepted by the MAC -> M2L. Two leaves -> P2P, or M2L when B is a
    remote stub whose bodies were not sent. Otherwise the pair is pushed.
    """
    if A.count == 0 or B.count == 0:
        return
    kind = MacKind.FMM if mac.kind == MacKind.LET else mac.kind
    if mac_accept(A, B, mac.theta, kind, offset):
        queue.add_m2l(source_tree, B, A, offset)
        stats.m2l_pairs += 1
    elif A.is_leaf and B.is_leaf:
        if B.is_remote:
            queue.add_m2l(source_tree, B, A, offset)
            stats.fallback_m2l += 1
        else:
            queue.add_p2p(A, source_tree, B, offset)
            stats.p2p_pairs += 1
    else:
        stack.append((A, B))


def dual_traverse(target_tree: Tree, source_tree: Tree, mac: MacParams, queue: BatchQueue,
                  stats: TraversalStats = None, offset=None, source_root: Cell = None) -> TraversalStats:
    """
    Traverse ``target_tree`` against ``source_tree`` (optionally shifted by
    ``offset``) and queue the resulting work items.

    Args:
        target_tree: tree of targets, upward pass not required
        source_tree: tree of sources with multipoles
        mac: acceptance parameters
        queue: BatchQueue of the target tree
        stats: counters to update (a fresh one is created if omitted)
        offset: image translation applied to every source
        source_root: start from this source cell instead of the root

    Returns:
        TraversalStats
    """
    stats = stats if stats is not None else TraversalStats()
    offset = None if offset is None or not np.any(offset) else np.asarray(offset, dtype=np.float64)
    stack = []
    interact(target_tree.root, source_root or source_tree.root, mac, queue, stats, stack, source_tree, offset)
    while stack:
        A, B = stack.pop()
        if B.is_leaf or (not A.is_leaf and A.radius >= B.radius):
            for child in A.children:
                interact(child, B, mac, queue, stats, stack, source_tree, offset)
        else:
            for child in B.children:
                interact(A, child, mac, queue, stats, stack, source_tree, offset)
    return stats


# ============================================================================
# PERIODIC IMAGES
# ============================================================================

def image_offsets(period, scale=1):
    """The 26 nonzero translations period * scale * {-1, 0, 1}^3."""
    return [np.array(o, dtype=np.float64) * period * scale
            for o in itertools.product((-1, 0, 1), repeat=3) if any(o)]


def far_image_local(root_multipole, shells: int, period: float, p: int) -> np.ndarray:
    """
    Local about the domain center from image shells 2..k.

    Copies of the domain are aggregated 3^3 at a time by M2M into
    super-cells centered on the domain; each of the 26 super-images of a
    level adds one M2L.

    Args:
        root_multipole: raw (3, T) multipole of the whole domain about its center
        shells: k; nothing is added for k < 2
        period: lattice period
        p: order

    Returns:
        np.ndarray: raw (3, T) local about the domain center
    """
    far_local = np.zeros_like(root_multipole)
    level_multipole = np.asarray(root_multipole, dtype=np.complex128)
    for level in range(2, shells + 1):
        copies = np.array(image_offsets(period, 3 ** (level - 2)))
        shifted = ex.m2m_raw_batch(np.repeat(level_multipole[None], len(copies), axis=0), copies, p)
        level_multipole = level_multipole + shifted.sum(axis=0)
        images = np.array(image_offsets(period, 3 ** (level - 1)))
        # source at center + image, target at center
        contributions = ex.m2l_raw_batch(np.repeat(level_multipole[None], len(images), axis=0), -images, p)
        far_local = far_local + contributions.sum(axis=0)
    return far_local


def add_far_local(target_tree: Tree, far_local, center):
    """Shift a local about ``center`` to the target root and accumulate it."""
    root = target_tree.root
    shift = root.center - np.asarray(center, dtype=np.float64)
    if np.any(shift):
        far_local = ex.l2l_raw_batch(far_local[None], shift[None], target_tree.order_p)[0]
    target_tree.locals[root.index] += far_local


def periodic_contribution(target_tree: Tree, source_tree: Tree, shells: int, mac: MacParams, queue: BatchQueue,
                          period: float, stats: TraversalStats = None) -> np.ndarray:
    """
    Sources of the periodic images around the original domain.

    Shell 1: the 26 neighbouring copies of the source tree are traversed
    like the original (P2P near the boundary, M2L farther in). Shells 2..k
    come from far_image_local and are added to the target root local.
    Images carry sources only.

    Args:
        target_tree: target tree (its root local receives the far images)
        source_tree: source tree after upward_pass; root must be the domain cube
        shells: k >= 1
        mac: acceptance parameters
        queue: BatchQueue of the target tree
        period: lattice period (domain edge length)
        stats: counters to update

    Returns:
        np.ndarray: raw (3, T) far-image local about the source root center
    """
    if shells < 1:
        raise InvalidInputError(f"periodic mode needs at least one image shell, got {shells}")
    stats = stats if stats is not None else TraversalStats()
    for offset in image_offsets(period):
        dual_traverse(target_tree, source_tree, mac, queue, stats, offset=offset)

    if queue.counting:
        return None
    center = source_tree.root.center
    far_local = far_image_local(source_tree.raw_multipoles()[0], shells, period, source_tree.order_p)
    if shells >= 2:
        add_far_local(target_tree, far_local, center)
        stats.periodic_m2l += 26 * (shells - 1)
        get_logger().child("traversal").debug(f"periodic shells={shells}: {stats.periodic_m2l} super-image M2L")
    return far_local


# ============================================================================
# UNIT-COUNTING KERNEL
# ============================================================================

def count_coverage(target_tree: Tree, source_tree: Tree, mac: MacParams, period: float = None,
                   shells: int = 0) -> np.ndarray:
    """
    Number of source particles covered for every target (input order).

    Each P2P item adds its source count to its targets, each M2L item adds
    its source count to the target cell, and cell counts are pushed down.
    With periodic shells the first image shell is included.
    """
    target_tree.coverage = None
    queue = BatchQueue(target_tree, counting=True)
    dual_traverse(target_tree, source_tree, mac, queue)
    if shells >= 1:
        periodic_contribution(target_tree, source_tree, shells, mac, queue, period)
    queue.flush()
    coverage = np.zeros(len(target_tree.particles), dtype=np.int64)
    inherited = np.array(target_tree.cell_coverage, dtype=np.int64)
    for cell in target_tree.cells[1:]:
        inherited[cell.index] += inherited[cell.parent]
    for cell in target_tree.leaves():
        coverage[cell.begin:cell.end] = target_tree.coverage[cell.begin:cell.end] + inherited[cell.index]
    target_tree.coverage = None
    target_tree.cell_coverage = None
    return target_tree.to_input_order(coverage)
