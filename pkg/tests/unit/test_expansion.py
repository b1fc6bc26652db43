"""
Unit tests for the solid harmonics and the P2M/M2M/M2L/L2L/L2P kernels.
"""
import numpy as np
import pytest

from fmm import expansion as ex
from fmm import harmonics as hm
from fmm.errors import InvalidInputError, OrderMismatchError
from fmm.model import ParticleSet, biot_savart_direct, direct_result


def _cluster(n, center, radius, seed):
    gen = np.random.default_rng(seed)
    positions = np.asarray(center) + gen.uniform(-radius, radius, size=(n, 3))
    return ParticleSet(positions, gen.standard_normal((n, 3)), 1e-3, np.arange(n) + 1000 * seed)


def _relative(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestHarmonics:
    """Series identities of the regular and irregular harmonics."""

    def test_addition_theorem_reproduces_inverse_distance(self):
        x = np.array([[3.0, 1.0, 2.0]])
        y = np.array([[0.3, -0.2, 0.1]])
        p = 24
        a = hm.to_full(hm.regular_tri(y, p), p)
        s = hm.to_full(hm.irregular_tri(x, p), p)
        series = float(np.sum(a * s).real)
        assert series == pytest.approx(1.0 / np.linalg.norm(x - y), rel=1e-12)

    def test_tri_full_round_trip(self):
        tri = hm.regular_tri(np.array([[0.4, -0.3, 0.2]]), 6)
        np.testing.assert_allclose(hm.to_tri(hm.to_full(tri, 6), 6), tri)

    def test_tri_indexing(self):
        assert hm.tri_size(4) == 10
        assert hm.tri_index(3, 2) == 8


class TestSingleExpansions:
    """Each operator against direct summation for well separated clusters."""

    def test_p2m_far_field_matches_direct(self):
        sources = _cluster(30, (0.0, 0.0, 0.0), 0.5, seed=1)
        multipole = ex.p2m(sources, np.zeros(3), p=12)
        points = np.array([[4.0, 0.5, -0.3], [-3.0, 3.0, 1.0]])
        probes = ParticleSet(points, np.zeros((2, 3)), 1e-3, [-1, -2])
        expected = biot_savart_direct(probes, sources, use_cutoff=True)
        assert _relative(ex.multipole_velocity(multipole, points), expected) < 1e-6

    def test_m2m_then_m2l_then_l2p_matches_direct(self):
        sources = _cluster(40, (0.2, 0.1, -0.1), 0.25, seed=2)
        targets = _cluster(25, (4.0, 0.0, 0.0), 0.25, seed=3)
        child = ex.p2m(sources, sources.positions.mean(axis=0), p=14)
        parent = ex.m2m(child, np.zeros(3))
        local = ex.l2l(ex.m2l(parent, np.array([4.2, 0.0, 0.0])), np.array([4.0, 0.0, 0.0]))
        result = ex.l2p(local, targets)
        exact = direct_result(targets, sources)
        assert _relative(result.velocity, exact.velocity) < 1e-5
        assert _relative(result.dgamma_dt, exact.dgamma_dt) < 1e-4

    def test_error_decreases_with_order(self):
        sources = _cluster(40, (0.0, 0.0, 0.0), 0.5, seed=4)
        targets = _cluster(20, (3.0, 0.0, 0.0), 0.5, seed=5)
        exact = direct_result(targets, sources).velocity
        errors = []
        for p in (4, 8, 12):
            local = ex.m2l(ex.p2m(sources, np.zeros(3), p), np.array([3.0, 0.0, 0.0]))
            errors.append(_relative(ex.l2p(local, targets).velocity, exact))
        assert errors[0] > errors[1] > errors[2]

    @pytest.mark.parametrize("p", [4, 10, 16])
    def test_m2m_equals_p2m_at_the_parent_center(self, p):
        child_center = np.array([0.3, -0.2, 0.1])
        sources = _cluster(30, child_center, 0.25, seed=31)
        shifted = ex.m2m(ex.p2m(sources, child_center, p), np.zeros(3))
        assert _relative(shifted.raw(), ex.p2m(sources, np.zeros(3), p).raw()) < 1e-12

    @pytest.mark.parametrize("p", [4, 10, 16])
    def test_m2m_composes(self, p):
        multipole = ex.p2m(_cluster(30, (0.1, 0.1, 0.1), 0.2, seed=32), np.array([0.1, 0.1, 0.1]), p)
        stepwise = ex.m2m(ex.m2m(multipole, np.array([0.25, -0.1, 0.0])), np.array([0.5, 0.2, -0.3]))
        direct = ex.m2m(multipole, np.array([0.5, 0.2, -0.3]))
        assert _relative(stepwise.raw(), direct.raw()) < 1e-12

    def test_zero_offset_shifts_are_identities(self):
        sources = _cluster(20, (0.0, 0.0, 0.0), 0.3, seed=33)
        multipole = ex.p2m(sources, np.zeros(3), 8)
        np.testing.assert_allclose(ex.m2m(multipole, multipole.center).raw(), multipole.raw(), rtol=1e-14, atol=0)
        local = ex.m2l(multipole, np.array([4.0, 0.0, 0.0]))
        np.testing.assert_allclose(ex.l2l(local, local.center).raw(), local.raw(), rtol=1e-14, atol=0)

    @pytest.mark.parametrize("p", [4, 10, 16])
    def test_l2l_preserves_the_local_field(self, p):
        sources = _cluster(30, (0.0, 0.0, 0.0), 0.25, seed=34)
        probes = _cluster(15, (4.1, 0.0, 0.0), 0.1, seed=35)
        local = ex.m2l(ex.p2m(sources, np.zeros(3), p), np.array([4.0, 0.0, 0.0]))
        shifted = ex.l2l(local, np.array([4.2, 0.1, -0.1]))
        before, after = ex.l2p(local, probes), ex.l2p(shifted, probes)
        assert _relative(after.velocity, before.velocity) < 1e-12
        assert _relative(after.dgamma_dt, before.dgamma_dt) < 1e-12

    @pytest.mark.parametrize("p", [6, 10, 14])
    def test_translations_do_not_change_the_kernel_chain(self, p):
        child_center = np.array([0.2, 0.1, -0.1])
        target_center = np.array([4.1, -0.1, 0.05])
        sources = _cluster(30, child_center, 0.2, seed=36)
        targets = _cluster(15, target_center, 0.1, seed=37)
        far_center = np.array([4.0, 0.0, 0.0])
        parent = ex.m2m(ex.p2m(sources, child_center, p), np.zeros(3))
        chain = ex.l2p(ex.l2l(ex.m2l(parent, far_center), target_center), targets)
        short = ex.l2p(ex.m2l(ex.p2m(sources, np.zeros(3), p), far_center), targets)
        assert _relative(chain.velocity, short.velocity) < 1e-12
        assert _relative(chain.dgamma_dt, short.dgamma_dt) < 1e-12

    @pytest.mark.parametrize("radius", [1e-3, 1.0, 1e3])
    def test_normalized_coefficients_keep_a_narrow_range(self, radius):
        p = 20
        sources = _cluster(50, (0.0, 0.0, 0.0), radius, seed=38)
        multipole = ex.p2m(sources, np.zeros(3), p, policy=ex.PrecisionPolicy(normalized=True))
        stored = np.abs(multipole.coeffs)
        assert 1e-4 <= stored.max() <= 1e4
        raw_top = np.abs(multipole.raw()[:, hm.tri_degrees(p) == p - 1]).max()
        if radius > 1.0:
            assert raw_top > 1e4
        elif radius < 1.0:
            assert raw_top < 1e-4

    def test_error_falls_geometrically_with_order(self):
        sources = _cluster(40, (0.0, 0.0, 0.0), 0.25, seed=39)
        targets = _cluster(20, (2.0, 0.0, 0.0), 0.25, seed=40)
        exact = direct_result(targets, sources).velocity
        orders = np.arange(2, 15)
        errors = []
        for p in orders:
            local = ex.m2l(ex.p2m(sources, np.zeros(3), int(p)), np.array([2.0, 0.0, 0.0]))
            errors.append(_relative(ex.l2p(local, targets).velocity, exact))
        slope = np.polyfit(orders, np.log(errors), 1)[0]
        assert slope < -0.5

    def test_single_precision_storage_stays_accurate(self):
        sources = _cluster(40, (0.0, 0.0, 0.0), 0.3, seed=6)
        targets = _cluster(20, (4.0, 0.0, 0.0), 0.3, seed=7)
        policy = ex.PrecisionPolicy.single_stabilized()
        multipole = ex.p2m(sources, np.zeros(3), 10, policy=policy)
        assert multipole.coeffs.dtype == np.complex64
        local = ex.m2l(multipole, np.array([4.0, 0.0, 0.0]))
        exact = direct_result(targets, sources).velocity
        assert _relative(ex.l2p(local, targets).velocity, exact) < 1e-4

    def test_single_precision_at_order_14_stays_in_the_truncation_band(self):
        sources = _cluster(40, (0.0, 0.0, 0.0), 0.5, seed=41)
        targets = _cluster(20, (3.0, 0.0, 0.0), 0.5, seed=42)
        center = np.array([3.0, 0.0, 0.0])
        exact = direct_result(targets, sources)
        double = ex.l2p(ex.m2l(ex.p2m(sources, np.zeros(3), 14), center), targets)
        policy = ex.PrecisionPolicy.single_stabilized()
        multipole = ex.p2m(sources, np.zeros(3), 14, policy=policy)
        local = ex.m2l(multipole, center)
        assert multipole.coeffs.dtype == local.coeffs.dtype == np.complex64
        single = ex.l2p(local, targets)

        # float32 rounding sets a floor once the truncation error drops below it
        for name in ("velocity", "dgamma_dt"):
            truncation = _relative(getattr(double, name), getattr(exact, name))
            assert _relative(getattr(single, name), getattr(double, name)) <= max(10.0 * truncation, 1e-4), name

    def test_adding_expansions_adds_fields(self):
        a = _cluster(10, (0.0, 0.0, 0.0), 0.3, seed=8)
        b = _cluster(10, (0.1, 0.0, 0.0), 0.3, seed=9)
        both = ParticleSet.concatenate([a, b])
        summed = ex.add_expansions(ex.p2m(a, np.zeros(3), 8, scale=1.0), ex.p2m(b, np.zeros(3), 8, scale=1.0))
        np.testing.assert_allclose(summed.raw(), ex.p2m(both, np.zeros(3), 8, scale=1.0).raw(), atol=1e-12)


class TestOperatorErrors:
    """Preconditions of the kernels."""

    def test_m2l_with_coincident_centers_raises(self):
        multipole = ex.p2m(_cluster(5, (0.0, 0.0, 0.0), 0.2, seed=10), np.zeros(3), 4)
        with pytest.raises(InvalidInputError):
            ex.m2l(multipole, np.zeros(3))

    def test_order_mismatch_raises(self):
        sources = _cluster(5, (0.0, 0.0, 0.0), 0.2, seed=11)
        with pytest.raises(OrderMismatchError):
            ex.add_expansions(ex.p2m(sources, np.zeros(3), 4), ex.p2m(sources, np.zeros(3), 6))

    def test_p2m_needs_particles_and_positive_order(self):
        with pytest.raises(InvalidInputError):
            ex.p2m(ParticleSet.empty(), np.zeros(3), 4)
        with pytest.raises(InvalidInputError):
            ex.p2m(_cluster(2, (0.0, 0.0, 0.0), 0.2, seed=12), np.zeros(3), 0)

    def test_p2p_counts_pairs(self):
        targets = _cluster(3, (0.0, 0.0, 0.0), 0.2, seed=13)
        sources = _cluster(5, (1.0, 0.0, 0.0), 0.2, seed=14)
        result = ex.p2p(targets, sources)
        assert result.pairs_biot_savart == result.pairs_stretching == 15
        assert result.accumulation_flops == 2610
