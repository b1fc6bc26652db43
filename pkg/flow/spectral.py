"""
Pseudo-spectral reference solver for decaying isotropic turbulence and
the lattice diagnostics shared with the vortex method.

The nonlinear term is evaluated in rotational form u x omega in physical
space, dealiased with the 2/3 rule and projected onto solenoidal modes.
Viscosity enters through the exact integrating factor exp(-nu k^2 dt);
time stepping is two-stage Runge-Kutta.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fmm.errors import InvalidInputError
from flow.fields import (EnergySpectrum, LatticeField, curl_hat, initial_velocity_hat, project_solenoidal,
                         shell_index, to_physical, to_spectral, wavenumbers)
from utils.logger import get_logger


@dataclass
class SpectralField:
    """Fourier coefficients (3, M, M, M) of a real solenoidal velocity."""
    u_hat: np.ndarray
    nu: float = 0.0
    time: float = 0.0
    half_width: float = math.pi
    K: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.nu < 0:
            raise InvalidInputError(f"nu must be >= 0, got {self.nu}")
        if self.K is None:
            self.K = wavenumbers(self.M, self.half_width)

    @property
    def M(self):
        return self.u_hat.shape[-1]

    def velocity(self) -> LatticeField:
        return LatticeField(to_physical(self.u_hat), self.half_width, self.time)

    def divergence(self) -> float:
        """max |k.u| / max |u| over all modes (0 for a zero field)."""
        scale = np.abs(self.u_hat).max()
        if scale == 0:
            return 0.0
        return float(np.abs(np.sum(self.K * self.u_hat, axis=0)).max() / scale)


def spectral_init(spectrum, seed: int, M: int, nu: float = 0.0, half_width: float = math.pi) -> SpectralField:
    """Same initial field as the vortex solver for the same seed."""
    return SpectralField(initial_velocity_hat(spectrum, seed, M, half_width), nu, 0.0, half_width)


def dealias_mask(K: np.ndarray, half_width: float = math.pi) -> np.ndarray:
    """2/3 rule: keep modes with every |k_i| < M/3 (in fundamental units)."""
    M = K.shape[-1]
    integer = np.abs(K) * half_width / math.pi
    return np.all(integer < M / 3.0, axis=0)


def nonlinear_term(u_hat: np.ndarray, K: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Projected, dealiased transform of u x omega."""
    u = to_physical(u_hat)
    omega = to_physical(curl_hat(u_hat, K))
    product = np.cross(u, omega, axis=0)
    return project_solenoidal(to_spectral(product) * mask, K)


def spectral_step(state: SpectralField, dt: float) -> SpectralField:
    """
    Advance by one step of integrating-factor Heun RK2.

    Warns (does not fail) when dt * max|u| / h exceeds 1.
    """
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    K = state.K
    mask = dealias_mask(K, state.half_width)
    K2 = np.sum(K * K, axis=0)
    decay = np.exp(-state.nu * K2 * dt)

    u_max = float(np.sqrt(np.sum(to_physical(state.u_hat) ** 2, axis=0)).max())
    h = 2.0 * state.half_width / state.M
    if dt * u_max / h > 1.0:
        get_logger().child("spectral").warning(
            f"CFL exceeded at t={state.time:.4g}: dt*max|u|/h = {dt * u_max / h:.3f}")

    n0 = nonlinear_term(state.u_hat, K, mask)
    predictor = decay * (state.u_hat + dt * n0)
    n1 = nonlinear_term(predictor, K, mask)
    u_hat = decay * state.u_hat + 0.5 * dt * (decay * n0 + n1)
    return replace(state, u_hat=project_solenoidal(u_hat, K), time=state.time + dt)


# ============================================================================
# DIAGNOSTICS
# ============================================================================

def _vector_values(u):
    values = u.values if isinstance(u, LatticeField) else np.asarray(u, dtype=np.float64)
    if values.ndim != 4 or values.shape[0] != 3:
        raise InvalidInputError(f"expected a (3, M, M, M) velocity field, got shape {values.shape}")
    return values


def energy_spectrum(u, half_width: float = math.pi) -> EnergySpectrum:
    """
    E(k) = sum over the integer shell k of 1/2 |u_hat|^2 / M^6.

    With the unscaled forward transform the shells add up to 1/2 <|u|^2>.
    """
    values = _vector_values(u)
    half_width = u.half_width if isinstance(u, LatticeField) else half_width
    M = values.shape[-1]
    u_hat = to_spectral(values)
    shells = shell_index(wavenumbers(M, half_width), half_width)
    energy = 0.5 * np.sum(np.abs(u_hat) ** 2, axis=0) / float(M) ** 6
    E = np.bincount(shells.ravel(), weights=energy.ravel())
    return EnergySpectrum(np.arange(E.size), E)


def velocity_gradient(u, half_width: float = math.pi) -> np.ndarray:
    """A[i, j] = d u_i / d x_j, spectrally, shape (3, 3, M, M, M)."""
    values = _vector_values(u)
    half_width = u.half_width if isinstance(u, LatticeField) else half_width
    K = wavenumbers(values.shape[-1], half_width)
    u_hat = to_spectral(values)
    return np.stack([np.stack([to_physical(1j * K[j] * u_hat[i]) for j in range(3)]) for i in range(3)])


def q_from_gradient(A: np.ndarray) -> np.ndarray:
    """Q = 1/2 (|Omega|^2 - |S|^2) for gradients A[i, j, ...]."""
    At = np.swapaxes(A, 0, 1)
    S = 0.5 * (A + At)
    W = 0.5 * (A - At)
    return 0.5 * (np.sum(W * W, axis=(0, 1)) - np.sum(S * S, axis=(0, 1)))


def q_invariant(u, half_width: float = math.pi) -> LatticeField:
    """Second invariant of the velocity gradient as a scalar lattice field."""
    half_width = u.half_width if isinstance(u, LatticeField) else half_width
    time = u.time if isinstance(u, LatticeField) else 0.0
    return LatticeField(q_from_gradient(velocity_gradient(u, half_width)), half_width, time)


@dataclass
class FlowStatistics:
    u_rms: float
    integral_scale: float
    taylor_microscale: float
    dissipation: float
    re_lambda: float
    turnover_time: float
    skewness: float
    flatness: float

    def as_dict(self):
        return dict(self.__dict__)


def flow_statistics(u, nu: float, half_width: float = math.pi) -> FlowStatistics:
    """
    Single-point and derivative statistics of an isotropic field.

    u_rms = sqrt(<|u|^2> / 3), L = pi / (2 u_rms^2) sum E(k)/k,
    eps = 2 nu sum k^2 E(k), lambda = u_rms / sqrt(<(du_i/dx_i)^2>),
    Re_lambda = u_rms lambda / nu, T = L / u_rms; skewness and flatness of
    the longitudinal derivatives.
    """
    values = _vector_values(u)
    half_width = u.half_width if isinstance(u, LatticeField) else half_width
    spectrum = energy_spectrum(values, half_width)
    k_unit = math.pi / half_width
    u_rms = math.sqrt(np.mean(np.sum(values ** 2, axis=0)) / 3.0)
    if u_rms == 0.0:
        return FlowStatistics(0.0, 0.0, 0.0, 0.0, 0.0, math.inf, 0.0, 0.0)

    k = spectrum.k[1:] * k_unit
    E = spectrum.E[1:]
    integral = math.pi / (2.0 * u_rms ** 2) * float(np.sum(E / k))
    dissipation = 2.0 * nu * float(np.sum(k ** 2 * E))

    A = velocity_gradient(values, half_width)
    longitudinal = np.stack([A[i, i] for i in range(3)])
    m2 = float(np.mean(longitudinal ** 2))
    m3 = float(np.mean(longitudinal ** 3))
    m4 = float(np.mean(longitudinal ** 4))
    taylor = u_rms / math.sqrt(m2) if m2 > 0 else math.inf
    re_lambda = u_rms * taylor / nu if nu > 0 else math.inf
    return FlowStatistics(
        u_rms=u_rms,
        integral_scale=integral,
        taylor_microscale=taylor,
        dissipation=dissipation,
        re_lambda=re_lambda,
        turnover_time=integral / u_rms,
        skewness=m3 / m2 ** 1.5 if m2 > 0 else 0.0,
        flatness=m4 / m2 ** 2 if m2 > 0 else 0.0,
    )
