"""
FMM engine: one object that owns the knobs and runs build, upward pass,
traversal, flush and downward pass for serial, periodic and distributed
evaluations.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from fmm import expansion as ex
from fmm.comm import Communicator
from fmm.constants import EngineDefaults, MacKind, TreeLimits
from fmm.errors import InvalidInputError
from fmm.let import evaluate_overlapped
from fmm.model import ParticleResult, ParticleSet
from fmm.partition import Partition
from fmm.timers import Category, NullTimers
from fmm.traversal import MacParams, TraversalStats, count_coverage, dual_traverse, periodic_contribution
from fmm.tree import BatchQueue, Box, build_tree, downward_pass, upward_pass
from utils.logger import get_logger


@dataclass
class FmmConfig:
    """
    Engine knobs.

    periodic_shells = 0 is free space; k >= 1 adds k levels of images
    around the cube of half width ``domain_half_width``.
    """
    p: int = EngineDefaults.ORDER
    theta: float = EngineDefaults.THETA
    n_crit: int = TreeLimits.DEFAULT_N_CRIT
    max_level: int = TreeLimits.DEFAULT_MAX_LEVEL
    periodic_shells: int = 0
    domain_half_width: float = EngineDefaults.DOMAIN_HALF_WIDTH
    precision: ex.PrecisionPolicy = field(default=ex.DOUBLE)
    batch_budget: int = EngineDefaults.BATCH_BUDGET
    mac_kind: str = MacKind.FMM
    threads: int = 1
    overlap: bool = True

    def __post_init__(self):
        if self.p < 1:
            raise InvalidInputError(f"p must be >= 1, got {self.p}")
        if self.n_crit < 1:
            raise InvalidInputError(f"n_crit must be >= 1, got {self.n_crit}")
        if self.periodic_shells < 0:
            raise InvalidInputError(f"periodic_shells must be >= 0, got {self.periodic_shells}")
        if not self.domain_half_width > 0:
            raise InvalidInputError(f"domain_half_width must be > 0, got {self.domain_half_width}")
        self.mac = MacParams(self.theta, self.mac_kind)

    @property
    def periodic(self):
        return self.periodic_shells > 0

    @property
    def period(self):
        return 2.0 * self.domain_half_width

    @property
    def domain(self):
        return Box.cube(self.domain_half_width)


class FmmEngine:
    """
    Evaluates velocity and stretching of targets induced by sources.

    Usage:
        engine = FmmEngine(FmmConfig(p=10, theta=0.4))
        result = engine.evaluate(particles)
    """

    def __init__(self, config: FmmConfig = None, timers=None):
        self.config = config or FmmConfig()
        self.timers = timers or NullTimers()
        self.last_stats = TraversalStats()
        self.logger = get_logger().child("engine")

    def _bounds(self, *sets):
        if self.config.periodic:
            domain = self.config.domain
            for s in sets:
                if len(s) and not np.all(domain.contains(s.positions)):
                    raise InvalidInputError("periodic evaluation needs every particle inside the domain; wrap first")
            return domain
        positions = [s.positions for s in sets if len(s)]
        return Box.bounding(np.concatenate(positions)) if positions else Box.cube(1.0)

    def _build(self, particles, bounds, with_multipoles=True):
        cfg = self.config
        with self.timers.measure(Category.TREE_CONSTRUCTION):
            tree = build_tree(particles, bounds, cfg.n_crit, cfg.max_level)
            if with_multipoles:
                upward_pass(tree, cfg.p, cfg.precision)
            else:
                tree.prepare_locals(cfg.p, cfg.precision)
        return tree

    def evaluate(self, targets: ParticleSet, sources: Optional[ParticleSet] = None) -> ParticleResult:
        """
        Velocity and stretching at ``targets`` (input order).

        Args:
            targets: target particles (their gammas drive the stretching term)
            sources: source particles; ``None`` means targets are the sources

        Returns:
            ParticleResult with pair counters
        """
        cfg = self.config
        targets.check_finite()
        same = sources is None
        sources = targets if same else sources
        sources.check_finite()
        if len(targets) == 0:
            return ParticleResult.zeros(0)
        if len(sources) == 0:
            return ParticleResult.zeros(len(targets))

        bounds = self._bounds(targets, sources)
        source_tree = self._build(sources, bounds)
        target_tree = source_tree if same else self._build(targets, bounds, with_multipoles=False)

        stats = TraversalStats()
        queue = BatchQueue(target_tree, cfg.batch_budget, self.timers, cfg.threads)
        dual_traverse(target_tree, source_tree, cfg.mac, queue, stats)
        if cfg.periodic:
            periodic_contribution(target_tree, source_tree, cfg.periodic_shells, cfg.mac, queue, cfg.period, stats)
        queue.flush()
        with self.timers.measure(Category.FAR_FIELD):
            downward_pass(target_tree)

        self.last_stats = stats
        self.logger.debug(f"evaluate: {len(targets)} targets, {len(sources)} sources, "
                          f"{stats.p2p_pairs} P2P / {stats.m2l_pairs} M2L cell pairs")
        return target_tree.input_order_result()

    def coverage(self, targets: ParticleSet, sources: Optional[ParticleSet] = None) -> np.ndarray:
        """Unit-counting kernel over the same work items as ``evaluate``."""
        cfg = self.config
        same = sources is None
        sources = targets if same else sources
        bounds = self._bounds(targets, sources)
        source_tree = build_tree(sources, bounds, cfg.n_crit, cfg.max_level)
        target_tree = source_tree if same else build_tree(targets, bounds, cfg.n_crit, cfg.max_level)
        return count_coverage(target_tree, source_tree, cfg.mac, cfg.period, cfg.periodic_shells)

    def evaluate_distributed(self, comm: Communicator, local: ParticleSet, partitions: List[Partition]):
        """
        Evaluate this rank's particles against the particles of all ranks.

        Collective over ``comm``. The local tree is built on the rank's
        partition box; remote sources arrive as LET fragments.

        Returns:
            tuple: (ParticleResult for ``local`` in input order, OverlapTiming)
        """
        cfg = self.config
        local.check_finite()
        box = partitions[comm.rank].box
        tree = self._build(local, box)
        stats = TraversalStats()
        queue = BatchQueue(tree, cfg.batch_budget, self.timers, cfg.threads)
        result, timing, _ = evaluate_overlapped(
            comm, tree, partitions, cfg.mac, queue, self.timers, overlap=cfg.overlap,
            period=cfg.period if cfg.periodic else None, shells=cfg.periodic_shells,
            domain_center=self.config.domain.center, stats=stats)
        self.last_stats = stats
        return result, timing
