"""
Unit tests for the pseudo-spectral reference solver and lattice diagnostics.
"""
import logging
import math

import numpy as np
import pytest

from flow.fields import SpectrumShape, lattice_axis, to_spectral
from flow.spectral import (SpectralField, dealias_mask, energy_spectrum, flow_statistics, q_from_gradient,
                           q_invariant, spectral_init, spectral_step, wavenumbers)
from fmm.errors import InvalidInputError


def _shear_wave(M, amplitude, k):
    """u_y = amplitude cos(k x), other components zero."""
    x = lattice_axis(M)[:, None, None]
    u = np.zeros((3, M, M, M))
    u[1] = amplitude * np.cos(k * x) * np.ones((1, M, M))
    return u


class TestSpectralStep:
    """Time stepping."""

    def test_zero_field_stays_zero(self):
        state = SpectralField(np.zeros((3, 8, 8, 8), dtype=complex), nu=0.1)
        after = spectral_step(state, 0.05)
        assert not np.any(after.u_hat)
        assert after.time == pytest.approx(0.05)

    def test_shear_wave_decays_at_the_viscous_rate(self):
        nu, dt, steps = 0.1, 0.1, 5
        state = SpectralField(to_spectral(_shear_wave(8, 0.7, 1)), nu=nu)
        for _ in range(steps):
            state = spectral_step(state, dt)
        expected = _shear_wave(8, 0.7 * math.exp(-nu * steps * dt), 1)
        np.testing.assert_allclose(state.velocity().values, expected, atol=1e-12)

    def test_inviscid_energy_is_nearly_conserved(self):
        M = 16
        state = spectral_init(SpectrumShape.for_lattice(M, 0.5), seed=2, M=M, nu=0.0)
        e0 = energy_spectrum(state.velocity()).total
        for _ in range(5):
            state = spectral_step(state, 0.01)
        assert energy_spectrum(state.velocity()).total == pytest.approx(e0, rel=1e-3)
        assert state.divergence() < 1e-10

    def test_viscous_energy_decreases(self):
        M = 16
        state = spectral_init(SpectrumShape.for_lattice(M, 0.5), seed=2, M=M, nu=0.05)
        e0 = energy_spectrum(state.velocity()).total
        for _ in range(5):
            state = spectral_step(state, 0.01)
        assert energy_spectrum(state.velocity()).total < e0

    @pytest.mark.parametrize("dt", [0.0, -0.1])
    def test_non_positive_dt_rejected(self, dt):
        with pytest.raises(InvalidInputError):
            spectral_step(SpectralField(np.zeros((3, 4, 4, 4), dtype=complex)), dt)

    def test_negative_viscosity_rejected(self):
        with pytest.raises(InvalidInputError):
            SpectralField(np.zeros((3, 4, 4, 4), dtype=complex), nu=-1.0)

    def test_dealias_mask_two_thirds(self):
        mask = dealias_mask(wavenumbers(12))
        # |k_i| < 4 on every axis: k in {-3..3} -> 7 values per axis
        assert mask.sum() == 7 ** 3


class TestDiagnostics:
    """Spectrum, Q and flow statistics."""

    def test_single_mode_spectrum(self):
        a = 0.8
        spectrum = energy_spectrum(_shear_wave(16, a, 5))
        assert spectrum.E[5] == pytest.approx(a * a / 4.0, rel=1e-12)
        assert spectrum.total == pytest.approx(a * a / 4.0, rel=1e-12)

    def test_parseval(self):
        u = np.random.default_rng(7).standard_normal((3, 8, 8, 8))
        assert energy_spectrum(u).total == pytest.approx(0.5 * np.mean(np.sum(u * u, axis=0)), rel=1e-12)

    def test_q_of_rigid_rotation(self):
        w = 1.5
        A = np.zeros((3, 3, 1, 1, 1))
        A[0, 1], A[1, 0] = -w, w
        # vorticity 2 w, Q = |omega|^2 / 4
        assert q_from_gradient(A).item() == pytest.approx(w * w)

    def test_q_of_pure_strain(self):
        A = np.zeros((3, 3, 1, 1, 1))
        A[0, 0], A[1, 1] = 1.0, -1.0
        assert q_from_gradient(A).item() == pytest.approx(-1.0)

    def test_q_of_uniform_flow_is_zero(self):
        u = np.ones((3, 8, 8, 8))
        np.testing.assert_allclose(q_invariant(u).values, 0.0, atol=1e-14)

    def test_q_of_shear_wave_averages_to_zero(self):
        q = q_invariant(_shear_wave(16, 1.0, 2)).values
        assert abs(q.mean()) < 1e-12

    def test_flow_statistics_of_random_field(self):
        M = 16
        state = spectral_init(SpectrumShape.for_lattice(M, 0.5), seed=1, M=M, nu=0.02)
        stats = flow_statistics(state.velocity(), nu=0.02)
        assert stats.u_rms == pytest.approx(math.sqrt(2.0 * 0.5 / 3.0), rel=1e-10)
        assert stats.integral_scale > 0
        assert stats.turnover_time == pytest.approx(stats.integral_scale / stats.u_rms)
        assert stats.re_lambda > 0
        assert 2.0 < stats.flatness < 5.0

    def test_flow_statistics_edge_cases(self):
        zero = flow_statistics(np.zeros((3, 8, 8, 8)), nu=0.1)
        assert zero.u_rms == 0.0
        assert math.isinf(zero.turnover_time)
        inviscid = flow_statistics(_shear_wave(8, 1.0, 1), nu=0.0)
        assert math.isinf(inviscid.re_lambda)

    def test_derivative_moments_of_a_single_wave(self):
        M = 8
        u = np.zeros((3, M, M, M))
        u[0] = np.sin(lattice_axis(M))[:, None, None] * np.ones((1, M, M))
        stats = flow_statistics(u, nu=0.1)
        # du_x/dx = cos x; the other longitudinal derivatives vanish
        assert stats.skewness == pytest.approx(0.0, abs=1e-12)
        assert stats.flatness == pytest.approx(4.5, rel=1e-10)

    def test_derivative_moments_of_two_waves(self):
        M = 16
        x = lattice_axis(M)[:, None, None]
        u = np.zeros((3, M, M, M))
        u[0] = (np.sin(x) + 0.5 * np.sin(2.0 * x)) * np.ones((1, M, M))
        stats = flow_statistics(u, nu=0.1)
        # d = cos x + cos 2x: <d^2> = 1, <d^3> = 3/4, <d^4> = 9/4, each diluted by the two zero components
        m2, m3, m4 = 1.0 / 3.0, 0.75 / 3.0, 2.25 / 3.0
        assert stats.skewness == pytest.approx(m3 / m2 ** 1.5, rel=1e-10)
        assert stats.flatness == pytest.approx(m4 / m2 ** 2, rel=1e-10)

    def test_rejects_scalar_field(self):
        with pytest.raises(InvalidInputError):
            energy_spectrum(np.zeros((8, 8, 8)))


class TestStabilityWarning:
    """Large steps are reported through the run logger."""

    def test_cfl_warning(self, caplog):
        state = SpectralField(to_spectral(_shear_wave(8, 50.0, 1)), nu=0.0)
        with caplog.at_level(logging.WARNING, logger="VortexFMM"):
            spectral_step(state, 0.1)
        assert any("CFL exceeded" in record.getMessage() for record in caplog.records)
