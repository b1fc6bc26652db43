"""
Octree over particles: Morton keys, tree construction, upward/downward
passes and the deferred evaluation queue for P2P and M2L work items.
"""

from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fmm import expansion as ex
from fmm import harmonics as hm
from fmm.constants import EngineDefaults, TreeLimits
from fmm.errors import InvalidInputError, MortonOverflowError
from fmm.model import ParticleResult, ParticleSet, interact_block
from fmm.timers import Category, NullTimers


# ============================================================================
# BOXES AND MORTON KEYS
# ============================================================================

@dataclass
class Box:
    """Axis-aligned box [lo, hi]."""
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3).copy()
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3).copy()
        if np.any(self.hi < self.lo) or not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise InvalidInputError(f"invalid box lo={self.lo} hi={self.hi}")

    @classmethod
    def cube(cls, half_width, center=(0.0, 0.0, 0.0)):
        center = np.asarray(center, dtype=np.float64)
        return cls(center - half_width, center + half_width)

    @classmethod
    def bounding(cls, positions):
        """Smallest cube holding every position (unit cube around a single point)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if positions.shape[0] == 0:
            return cls.cube(1.0)
        lo = positions.min(axis=0)
        hi = positions.max(axis=0)
        half = 0.5 * float(np.max(hi - lo))
        if half == 0.0:
            half = 1.0
        half *= 1.0 + 1e-9
        return cls.cube(half, 0.5 * (lo + hi))

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def half_extent(self):
        return 0.5 * (self.hi - self.lo)

    @property
    def volume(self):
        return float(np.prod(self.hi - self.lo))

    def contains(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def intersection_volume(self, other):
        extent = np.minimum(self.hi, other.hi) - np.maximum(self.lo, other.lo)
        return float(np.prod(np.clip(extent, 0.0, None)))


@dataclass(frozen=True)
class MortonKey:
    """Interleaved cell key; bit 3i holds x bit i, 3i+1 y, 3i+2 z."""
    key: int
    level: int


def _dilate(v):
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def morton_keys(positions, bounds: Box, level: int):
    """
    Morton keys of many positions at one level.

    Args:
        positions: (N, 3) inside ``bounds``
        bounds: domain box
        level: 0..21

    Returns:
        np.ndarray: (N,) uint64 keys
    """
    if level > TreeLimits.MAX_MORTON_LEVEL:
        raise MortonOverflowError(f"level {level} exceeds {TreeLimits.MAX_MORTON_LEVEL} (63-bit key)")
    if level < 0:
        raise InvalidInputError(f"level must be >= 0, got {level}")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(positions)):
        raise InvalidInputError("non-finite position")
    if not np.all(bounds.contains(positions)):
        raise InvalidInputError("position outside bounds")
    cells = 1 << level
    extent = np.where(bounds.hi > bounds.lo, bounds.hi - bounds.lo, 1.0)
    # a coordinate on a cell face belongs to the lower cell, as in build_tree
    q = np.ceil((positions - bounds.lo) / extent * cells).astype(np.int64) - 1
    q = np.clip(q, 0, cells - 1)
    return _dilate(q[:, 0]) | (_dilate(q[:, 1]) << np.uint64(1)) | (_dilate(q[:, 2]) << np.uint64(2))


def morton_key(position, bounds: Box, level: int) -> MortonKey:
    """Morton key of a single position."""
    return MortonKey(int(morton_keys(position, bounds, level)[0]), level)


# ============================================================================
# CELLS AND TREES
# ============================================================================

@dataclass(eq=False)
class Cell:
    """
    Rectangular tree node.

    Particles of the cell are tree.particles[begin:end]. LET stubs received
    without bodies have an empty range, ``is_remote`` set and ``body_count``
    holding the number of particles they stand for.
    """
    lo: np.ndarray
    hi: np.ndarray
    begin: int
    end: int
    level: int = 0
    index: int = 0
    parent: int = -1
    children: List["Cell"] = field(default_factory=list)
    is_remote: bool = False
    body_count: Optional[int] = None
    tree: Optional["Tree"] = field(default=None, repr=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.center = 0.5 * (self.lo + self.hi)
        self.half_extent = 0.5 * (self.hi - self.lo)
        self.radius = float(np.sqrt(self.half_extent @ self.half_extent))

    @property
    def is_leaf(self):
        return not self.children

    @property
    def count(self):
        return self.end - self.begin if self.body_count is None else self.body_count

    @property
    def bounds(self):
        return Box(self.lo, self.hi)

    @property
    def multipole(self):
        return self.tree.multipole_of(self.index)

    @property
    def local(self):
        return self.tree.local_of(self.index)


class Tree:
    """
    Cells in breadth-first order over a reordered ParticleSet.

    Attributes:
        particles: particles sorted so every cell owns a contiguous range
        permutation: permutation[i] = input index of sorted particle i
        cells: breadth-first list, cells[0] is the root
        order_p / policy: set by upward_pass
        multipoles: (n_cells, 3, T) stored coefficients
        locals: (n_cells, 3, T) raw complex128 accumulators
        result: per-particle ParticleResult in sorted order
    """

    def __init__(self, particles: ParticleSet, cells: List[Cell], permutation, bounds: Box):
        self.particles = particles
        self.cells = cells
        self.permutation = np.asarray(permutation, dtype=np.int64)
        self.bounds = bounds
        self.order_p = None
        self.policy = ex.DOUBLE
        self.multipoles = None
        self.locals = None
        self._raw_multipoles = None
        self.result = ParticleResult.zeros(len(particles))
        self.coverage = None
        self.cell_coverage = None
        for cell in cells:
            cell.tree = self

    @property
    def root(self):
        return self.cells[0]

    def __len__(self):
        return len(self.cells)

    def leaves(self):
        return [c for c in self.cells if c.is_leaf]

    @property
    def depth(self):
        return max(c.level for c in self.cells)

    @property
    def centers(self):
        return np.array([c.center for c in self.cells])

    @property
    def radii(self):
        return np.array([c.radius for c in self.cells])

    def raw_multipoles(self):
        """Unnormalized complex128 multipoles of every cell (cached)."""
        if self._raw_multipoles is None:
            self._raw_multipoles = ex.load_coefficients(self.multipoles, self.radii, -1, self.order_p, self.policy)
        return self._raw_multipoles

    def set_multipoles(self, raw, p, policy):
        self.order_p = p
        self.policy = policy
        self.multipoles = ex.store_coefficients(raw, self.radii, -1, p, policy)
        self._raw_multipoles = None
        self.reset_locals()

    def prepare_locals(self, p, policy=ex.DOUBLE):
        """Targets-only trees (lattice probes) need locals but no multipoles."""
        self.order_p = p
        self.policy = policy
        self.reset_locals()

    def reset_locals(self):
        if self.order_p is not None:
            self.locals = np.zeros((len(self.cells), 3, hm.tri_size(self.order_p)), dtype=np.complex128)
        self.result = ParticleResult.zeros(len(self.particles))

    def multipole_of(self, index):
        if self.multipoles is None:
            return None
        cell = self.cells[index]
        return ex.Multipole(self.order_p, self.multipoles[index], cell.center.copy(), cell.radius, self.policy)

    def local_of(self, index):
        if self.locals is None:
            return None
        cell = self.cells[index]
        return ex.Local.from_raw(self.locals[index], cell.center, self.order_p, cell.radius, self.policy)

    def to_input_order(self, array):
        """Undo the build permutation for a per-particle array."""
        out = np.empty_like(array)
        out[self.permutation] = array
        return out

    def input_order_result(self):
        return ParticleResult(self.to_input_order(self.result.velocity), self.to_input_order(self.result.dgamma_dt),
                              self.result.pairs_biot_savart, self.result.pairs_stretching)

    def by_level(self):
        levels = defaultdict(list)
        for cell in self.cells:
            levels[cell.level].append(cell.index)
        return levels


def build_tree(particles: ParticleSet, bounds: Optional[Box] = None, n_crit: int = TreeLimits.DEFAULT_N_CRIT,
               max_level: int = TreeLimits.DEFAULT_MAX_LEVEL) -> Tree:
    """
    Midpoint-split octree over (possibly rectangular) ``bounds``.

    Args:
        particles: ParticleSet (may be empty)
        bounds: root box; defaults to the bounding cube of the particles
        n_crit: maximum particles per leaf
        max_level: depth cap (coincident particles stop here)

    Returns:
        Tree
    """
    if n_crit < 1:
        raise InvalidInputError(f"n_crit must be >= 1, got {n_crit}")
    if not 0 <= max_level <= TreeLimits.MAX_MORTON_LEVEL:
        raise InvalidInputError(f"max_level must be in [0, {TreeLimits.MAX_MORTON_LEVEL}], got {max_level}")
    particles.check_finite()
    bounds = bounds if bounds is not None else Box.bounding(particles.positions)
    if len(particles) and not np.all(bounds.contains(particles.positions)):
        raise InvalidInputError("particles outside the tree bounds")

    positions = particles.positions
    perm = np.arange(len(particles), dtype=np.int64)
    root = Cell(bounds.lo, bounds.hi, 0, len(particles))
    cells = [root]
    pending = deque([root])

    while pending:
        cell = pending.popleft()
        if cell.count <= n_crit or cell.level >= max_level:
            continue
        b, e = cell.begin, cell.end
        local = perm[b:e]
        above = positions[local] > cell.center
        octant = above[:, 0] + 2 * above[:, 1] + 4 * above[:, 2]
        order = np.argsort(octant, kind="stable")
        perm[b:e] = local[order]
        counts = np.bincount(octant, minlength=8)
        start = b
        for oct_index in range(8):
            n = int(counts[oct_index])
            if n == 0:
                continue
            bits = np.array([(oct_index >> k) & 1 for k in range(3)], dtype=bool)
            child = Cell(np.where(bits, cell.center, cell.lo), np.where(bits, cell.hi, cell.center),
                         start, start + n, level=cell.level + 1, index=len(cells), parent=cell.index)
            cells.append(child)
            cell.children.append(child)
            pending.append(child)
            start += n

    return Tree(particles.subset(perm), cells, perm, bounds)


# ============================================================================
# UPWARD / DOWNWARD PASSES
# ============================================================================

def upward_pass(tree: Tree, p: int = EngineDefaults.ORDER, policy: ex.PrecisionPolicy = ex.DOUBLE) -> Tree:
    """
    P2M at the leaves, then M2M level by level up to the root.

    Raw coefficients are accumulated in double precision and stored once
    under ``policy``.
    """
    if p < 1:
        raise InvalidInputError(f"p must be >= 1, got {p}")
    raw = np.zeros((len(tree.cells), 3, hm.tri_size(p)), dtype=np.complex128)
    parts = tree.particles
    for cell in tree.cells:
        if cell.is_leaf and cell.end > cell.begin:
            sl = slice(cell.begin, cell.end)
            raw[cell.index] = ex.p2m_raw(parts.positions[sl] - cell.center, parts.gammas[sl], p)

    levels = tree.by_level()
    for level in sorted(levels, reverse=True):
        if level == 0:
            continue
        idx = np.array(levels[level])
        parents = np.array([tree.cells[i].parent for i in idx])
        offsets = tree.centers[idx] - tree.centers[parents]
        np.add.at(raw, parents, ex.m2m_raw_batch(raw[idx], offsets, p))

    tree.set_multipoles(raw, p, policy)
    return tree


def downward_pass(tree: Tree) -> ParticleResult:
    """
    L2L from the root to the leaves, then L2P into ``tree.result``.

    Results already accumulated by P2P flushes are kept.
    """
    p = tree.order_p
    levels = tree.by_level()
    centers = tree.centers
    for level in sorted(levels):
        if level == 0:
            continue
        idx = np.array(levels[level])
        parents = np.array([tree.cells[i].parent for i in idx])
        active = np.any(tree.locals[parents] != 0, axis=(1, 2))
        if not np.any(active):
            continue
        idx, parents = idx[active], parents[active]
        tree.locals[idx] += ex.l2l_raw_batch(tree.locals[parents], centers[idx] - centers[parents], p)

    parts = tree.particles
    for cell in tree.cells:
        if not cell.is_leaf or cell.end == cell.begin or not np.any(tree.locals[cell.index]):
            continue
        sl = slice(cell.begin, cell.end)
        partial = ex.l2p(tree.local_of(cell.index), parts.subset(sl))
        tree.result.velocity[sl] += partial.velocity
        tree.result.dgamma_dt[sl] += partial.dgamma_dt

    return tree.result


# ============================================================================
# BATCH QUEUE
# ============================================================================

class BatchQueue:
    """
    Deferred P2P and M2L work for one target tree.

    Items may reference any number of source trees (the local tree, periodic
    images of it, received LET fragments). ``flush`` executes the queue in
    sub-batches of at most ``budget`` target cells (P2P) or items (M2L).

    With ``counting`` set the queue runs the unit-counting kernel: every
    covered (target, source) pair adds one to the target's coverage.
    """

    def __init__(self, target_tree: Tree, budget: int = EngineDefaults.BATCH_BUDGET, timers=None,
                 threads: int = 1, counting: bool = False):
        if budget < 1:
            raise InvalidInputError(f"batch budget must be >= 1, got {budget}")
        self.target_tree = target_tree
        self.budget = budget
        self.timers = timers or NullTimers()
        self.threads = max(1, int(threads))
        self.counting = counting
        self.p2p_items = []
        self.m2l_items = []
        if counting and target_tree.coverage is None:
            target_tree.coverage = np.zeros(len(target_tree.particles), dtype=np.int64)
            target_tree.cell_coverage = np.zeros(len(target_tree.cells), dtype=np.int64)

    def __len__(self):
        return len(self.p2p_items) + len(self.m2l_items)

    def add_p2p(self, target: Cell, source_tree: Tree, source: Cell, offset=None):
        self.p2p_items.append((target.index, source_tree, source.index, _offset(offset)))

    def add_m2l(self, source_tree: Tree, source: Cell, target: Cell, offset=None):
        self.m2l_items.append((source_tree, source.index, target.index, _offset(offset)))

    def flush(self, budget: Optional[int] = None):
        """Execute and clear every queued item."""
        budget = budget or self.budget
        p2p, self.p2p_items = self.p2p_items, []
        m2l, self.m2l_items = self.m2l_items, []
        if self.counting:
            self._count(p2p, m2l)
            return
        self._flush_p2p(p2p, budget)
        self._flush_m2l(m2l, budget)

    def _count(self, p2p, m2l):
        tree = self.target_tree
        for t_index, source_tree, s_index, _ in p2p:
            t = tree.cells[t_index]
            tree.coverage[t.begin:t.end] += source_tree.cells[s_index].count
        for source_tree, s_index, t_index, _ in m2l:
            tree.cell_coverage[t_index] += source_tree.cells[s_index].count

    def _flush_p2p(self, items, budget):
        if not items:
            return
        grouped = defaultdict(list)
        for t_index, source_tree, s_index, offset in items:
            grouped[t_index].append((source_tree, s_index, offset))
        targets = list(grouped)
        for lo in range(0, len(targets), budget):
            batch = targets[lo:lo + budget]
            with self.timers.measure(Category.BATCH_BUFFERING):
                buffers = [self._gather_sources(grouped[t]) for t in batch]
            with self.timers.measure(Category.NEAR_FIELD):
                if self.threads > 1:
                    with ThreadPoolExecutor(max_workers=self.threads) as pool:
                        outputs = list(pool.map(self._p2p_cell, batch, buffers))
                else:
                    outputs = [self._p2p_cell(t, buf) for t, buf in zip(batch, buffers)]
            result = self.target_tree.result
            for t_index, (velocity, dgamma, pairs) in zip(batch, outputs):
                cell = self.target_tree.cells[t_index]
                result.velocity[cell.begin:cell.end] += velocity
                result.dgamma_dt[cell.begin:cell.end] += dgamma
                result.pairs_biot_savart += pairs
                result.pairs_stretching += pairs

    @staticmethod
    def _gather_sources(entries):
        positions, gammas, sigmas, ids = [], [], [], []
        for source_tree, s_index, offset in entries:
            cell = source_tree.cells[s_index]
            sl = slice(cell.begin, cell.end)
            pos = source_tree.particles.positions[sl]
            positions.append(pos if offset is None else pos + offset)
            gammas.append(source_tree.particles.gammas[sl])
            sigmas.append(source_tree.particles.sigmas[sl])
            ids.append(source_tree.particles.ids[sl])
        return (np.concatenate(positions), np.concatenate(gammas), np.concatenate(sigmas), np.concatenate(ids))

    def _p2p_cell(self, t_index, buffer):
        cell = self.target_tree.cells[t_index]
        parts = self.target_tree.particles
        sl = slice(cell.begin, cell.end)
        src_pos, src_gamma, src_sigma, src_ids = buffer
        velocity, dgamma = interact_block(parts.positions[sl], parts.gammas[sl], parts.ids[sl],
                                          src_pos, src_gamma, src_sigma, src_ids,
                                          use_cutoff=True, want_stretching=True)
        return velocity, dgamma, (cell.end - cell.begin) * src_pos.shape[0]

    def _flush_m2l(self, items, budget):
        if not items:
            return
        tree = self.target_tree
        centers = tree.centers
        p = tree.order_p
        for lo in range(0, len(items), budget):
            batch = items[lo:lo + budget]
            with self.timers.measure(Category.BATCH_BUFFERING):
                coeffs = np.stack([src.raw_multipoles()[s] for src, s, _, _ in batch])
                targets = np.array([t for _, _, t, _ in batch])
                offsets = np.array([
                    centers[t] - (src.cells[s].center + (0.0 if off is None else off))
                    for src, s, t, off in batch
                ])
            with self.timers.measure(Category.FAR_FIELD):
                np.add.at(tree.locals, targets, ex.m2l_raw_batch(coeffs, offsets, p))


def _offset(offset):
    if offset is None:
        return None
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    return None if not np.any(offset) else offset
