"""
Unit tests for Morton keys, tree construction, the acceptance criteria and
the dual traversal (checked with the unit-counting kernel).
"""
import numpy as np
import pytest

from fmm.constants import MacKind
from fmm.engine import FmmConfig, FmmEngine
from fmm.errors import InvalidInputError, MortonOverflowError
from fmm.traversal import MacParams, box_distance, dual_traverse, image_offsets, mac_accept, mac_let
from fmm.tree import BatchQueue, Box, Cell, build_tree, downward_pass, morton_key, morton_keys, upward_pass
from harness.runs import relative_l2


class TestMorton:
    """Interleaved keys."""

    def test_bit_layout(self):
        box = Box.cube(1.0)
        # octant (x high, y low, z high) at level 1
        assert morton_key([0.5, -0.5, 0.5], box, 1).key == 0b101

    def test_level_above_limit_overflows(self):
        with pytest.raises(MortonOverflowError):
            morton_keys(np.zeros((1, 3)), Box.cube(1.0), 22)

    def test_position_outside_bounds_rejected(self):
        with pytest.raises(InvalidInputError):
            morton_keys(np.array([[2.0, 0.0, 0.0]]), Box.cube(1.0), 3)

    def test_keys_are_distinct_for_distinct_cells(self):
        axis = np.linspace(-0.9, 0.9, 4)
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        keys = morton_keys(grid, Box.cube(1.0), 2)
        assert len(np.unique(keys)) == 64

    def test_face_coordinates_take_the_lower_cell(self):
        box = Box.cube(1.0)
        assert morton_key([0.0, 0.0, 0.0], box, 1).key == 0
        assert morton_key([0.0, 0.5, 0.0], box, 1).key == 0b010
        assert morton_key([-1.0, -1.0, -1.0], box, 3).key == 0

    def test_keys_agree_with_tree_octants(self):
        from fmm.model import ParticleSet

        axis = np.array([-0.5, 0.0, 0.5])
        grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
        box = Box.cube(1.0)
        tree = build_tree(ParticleSet(grid, np.ones_like(grid), 0.1), box, n_crit=1, max_level=2)
        for cell in tree.leaves():
            inside = tree.particles.positions[cell.begin:cell.end]
            expected = morton_key(cell.center, box, cell.level).key
            assert np.all(morton_keys(inside, box, cell.level) == expected)


class TestBuildTree:
    """Octree construction."""

    def test_leaves_partition_the_particles(self, random_cloud):
        particles = random_cloud(500)
        tree = build_tree(particles, n_crit=16)
        leaves = tree.leaves()
        assert sum(cell.count for cell in leaves) == 500
        assert all(cell.count <= 16 for cell in leaves)
        np.testing.assert_array_equal(np.sort(tree.permutation), np.arange(500))

    def test_particles_lie_in_their_leaf(self, random_cloud):
        tree = build_tree(random_cloud(300), n_crit=8)
        for cell in tree.leaves():
            inside = cell.bounds.contains(tree.particles.positions[cell.begin:cell.end])
            assert np.all(inside)

    def test_coincident_particles_stop_at_max_level(self):
        from fmm.model import ParticleSet

        particles = ParticleSet(np.zeros((10, 3)), np.ones((10, 3)), 0.1)
        tree = build_tree(particles, Box.cube(1.0), n_crit=2, max_level=4)
        assert tree.depth <= 4

    def test_empty_set_gives_single_root(self):
        from fmm.model import ParticleSet

        tree = build_tree(ParticleSet.empty())
        assert len(tree.cells) == 1
        assert tree.root.count == 0

    @pytest.mark.parametrize("kwargs", [{"n_crit": 0}, {"max_level": 22}])
    def test_rejects_bad_limits(self, random_cloud, kwargs):
        with pytest.raises(InvalidInputError):
            build_tree(random_cloud(10), **kwargs)


class TestAcceptance:
    """Multipole acceptance criteria."""

    def _cell(self, center, half):
        center = np.asarray(center, dtype=np.float64)
        return Cell(center - half, center + half, 0, 1)

    def test_mac_params_validate(self):
        with pytest.raises(InvalidInputError):
            MacParams(theta=1.0)
        with pytest.raises(InvalidInputError):
            MacParams(theta=0.5, kind="nearest")

    def test_fmm_criterion(self):
        a = self._cell([0.0, 0.0, 0.0], 0.5)
        b = self._cell([10.0, 0.0, 0.0], 0.5)
        # (2 r_a + 2 r_b) / R = 4 * sqrt(0.75) / 10 ~ 0.35
        assert mac_accept(a, b, 0.4)
        assert not mac_accept(a, b, 0.3)

    def test_barnes_hut_only_sees_source_size(self):
        tiny = self._cell([0.0, 0.0, 0.0], 0.01)
        big_target = self._cell([0.0, 0.0, 0.0], 3.0)
        source = self._cell([10.0, 0.0, 0.0], 0.01)
        assert mac_accept(big_target, source, 0.1, MacKind.BARNES_HUT)
        assert not mac_accept(big_target, source, 0.1, MacKind.FMM)
        assert mac_accept(tiny, source, 0.1, MacKind.FMM)

    def test_coincident_centers_never_accepted(self):
        a = self._cell([0.0, 0.0, 0.0], 0.1)
        assert not mac_accept(a, a, 0.9)

    def test_let_criterion_measures_to_the_box_edge(self):
        source = self._cell([10.0, 0.0, 0.0], 0.5)
        box = Box.cube(1.0)
        # 2 * (2 r) / R = 4 * sqrt(0.75) / 9 ~ 0.385
        assert mac_let(source, box, 0.4)
        assert not mac_let(source, box, 0.3)
        assert not mac_let(source, box, 0.4, offset=[-10.0, 0.0, 0.0])
        assert mac_let(source, box, 0.4, offset=[-20.0, 0.0, 0.0])
        assert not mac_let(self._cell([0.5, 0.0, 0.0], 0.1), box, 0.9)

    def test_box_distance(self):
        box = Box.cube(1.0)
        assert box_distance([0.5, 0.0, 0.0], box) == 0.0
        assert box_distance([4.0, 0.0, 0.0], box) == pytest.approx(3.0)
        assert box_distance([4.0, 5.0, 1.0], box) == pytest.approx(5.0)

    def test_image_offsets(self):
        offsets = image_offsets(2.0)
        assert len(offsets) == 26
        assert not any(np.all(o == 0) for o in offsets)


class TestCoverage:
    """Every source is counted exactly once per target."""

    @pytest.mark.parametrize("theta", [0.3, 0.5, 0.8])
    @pytest.mark.parametrize("kind", [MacKind.FMM, MacKind.BARNES_HUT])
    def test_free_space_coverage(self, random_cloud, theta, kind):
        particles = random_cloud(400, seed=5)
        engine = FmmEngine(FmmConfig(p=4, theta=theta, n_crit=16, mac_kind=kind))
        np.testing.assert_array_equal(engine.coverage(particles), 400)

    def test_coverage_between_distinct_sets(self, random_cloud):
        targets = random_cloud(150, seed=6)
        sources = random_cloud(250, seed=7)
        engine = FmmEngine(FmmConfig(p=4, theta=0.5, n_crit=8))
        np.testing.assert_array_equal(engine.coverage(targets, sources), 250)

    def test_periodic_first_shell_coverage(self, random_cloud):
        particles = random_cloud(200, seed=8)
        engine = FmmEngine(FmmConfig(p=4, theta=0.5, n_crit=16, periodic_shells=1))
        np.testing.assert_array_equal(engine.coverage(particles), 27 * 200)


class TestBatchQueue:
    """Flushing in pieces gives the same results as one flush."""

    def _queued(self, particles, budget=8):
        tree = upward_pass(build_tree(particles, n_crit=4), p=6)
        queue = BatchQueue(tree, budget=budget)
        dual_traverse(tree, tree, MacParams(0.5), queue)
        return tree, queue

    def _finish(self, tree):
        downward_pass(tree)
        return tree.input_order_result()

    def test_two_half_flushes_equal_one_flush(self, random_cloud):
        particles = random_cloud(600, seed=21)
        tree, queue = self._queued(particles)
        queue.flush()
        whole = self._finish(tree)

        tree, queue = self._queued(particles)
        p2p, m2l = queue.p2p_items, queue.m2l_items
        assert p2p and m2l
        queue.p2p_items, queue.m2l_items = p2p[:len(p2p) // 2], m2l[:len(m2l) // 2]
        queue.flush()
        queue.p2p_items, queue.m2l_items = p2p[len(p2p) // 2:], m2l[len(m2l) // 2:]
        queue.flush()
        halves = self._finish(tree)

        assert len(queue) == 0
        assert relative_l2(halves.velocity, whole.velocity) < 1e-13
        assert relative_l2(halves.dgamma_dt, whole.dgamma_dt) < 1e-13
        assert halves.pairs_biot_savart == whole.pairs_biot_savart

    @pytest.mark.parametrize("budget", [1, 7, 10 ** 6])
    def test_budget_split_does_not_change_results(self, random_cloud, budget):
        particles = random_cloud(600, seed=22)
        reference = FmmEngine(FmmConfig(p=6, theta=0.5, n_crit=4, batch_budget=64)).evaluate(particles)
        result = FmmEngine(FmmConfig(p=6, theta=0.5, n_crit=4, batch_budget=budget)).evaluate(particles)
        assert relative_l2(result.velocity, reference.velocity) < 1e-13
        assert relative_l2(result.dgamma_dt, reference.dgamma_dt) < 1e-13
        assert result.pairs_biot_savart == reference.pairs_biot_savart

    def test_budget_below_one_rejected(self, random_cloud):
        tree = build_tree(random_cloud(20), n_crit=8)
        with pytest.raises(InvalidInputError):
            BatchQueue(tree, budget=0)
