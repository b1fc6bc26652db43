"""
Vortex particle method.

Particles carry vorticity as Gaussian blobs (position, vector strength,
core radius). Each step convects and stretches them with the FMM-evaluated
velocity and stretching rate, spreads the cores by the exact viscous rule
sigma^2 += 2 nu dt, and wraps positions into the periodic box. Every few
steps the particles are replaced by a fresh lattice whose Gaussian field
matches the old one at the lattice nodes.

The engine returns the target-gradient kernel; the physical velocity and
stretching rate are its negatives.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from fmm.comm import Communicator
from fmm.constants import FlowDefaults
from fmm.engine import FmmEngine
from fmm.errors import ConvergenceError, InvalidInputError
from fmm.model import FlowParams, ParticleResult, ParticleSet
from fmm.partition import Partition, assign_to_partitions, covering_partitions
from fmm.timers import Category, NullTimers
from flow.fields import (EnergySpectrum, LatticeField, curl_hat, initial_velocity_hat, lattice_axis, lattice_points,
                         to_physical, to_spectral, vorticity_on_lattice, wavenumbers)
from flow.spectral import energy_spectrum
from utils.logger import get_logger

__all__ = [
    "SimState", "EnergySpectrum", "init_from_spectrum", "step", "advance", "reinitialize",
    "rbf_strengths", "velocity_on_lattice", "lattice_spectrum", "serial_rates", "distributed_rates",
]


@dataclass
class SimState:
    """
    Particles plus the lattice they are (re)initialized on.

    sigma0 = overlap_ratio * h with h = period / lattice_n.
    """
    particles: ParticleSet
    time: float
    params: FlowParams
    lattice_n: int
    sigma0: float
    overlap_ratio: float = FlowDefaults.OVERLAP_RATIO
    step_count: int = 0

    def __post_init__(self):
        if self.overlap_ratio < 1.0:
            raise InvalidInputError(f"overlap_ratio must be >= 1 (cores must overlap), got {self.overlap_ratio}")
        if self.lattice_n < 2:
            raise InvalidInputError(f"lattice size must be >= 2, got {self.lattice_n}")

    @property
    def h(self):
        return self.params.period / self.lattice_n

    def total_vorticity(self):
        return self.particles.gammas.sum(axis=0)


def _lattice_particles(gammas, M, half_width, sigma0):
    return ParticleSet(lattice_points(M, half_width), gammas, sigma0)


def init_from_spectrum(spectrum, seed: int, M: int, params: FlowParams = None,
                       overlap_ratio: float = FlowDefaults.OVERLAP_RATIO, sharpen: bool = False) -> SimState:
    """
    One particle per lattice node carrying the vorticity of the shared
    random initial field: gamma = omega h^3, sigma = overlap_ratio h.

    With ``sharpen`` the strengths are instead solved so that the Gaussian
    field of the particles reproduces omega at the nodes.
    """
    params = params or FlowParams()
    hw = params.domain_half_width
    h = params.period / M
    sigma0 = overlap_ratio * h
    u_hat = initial_velocity_hat(spectrum, seed, M, hw)
    omega = to_physical(curl_hat(u_hat, wavenumbers(M, hw)))
    if sharpen:
        gammas = rbf_strengths(omega, sigma0, hw)
    else:
        gammas = omega.reshape(3, -1).T * h ** 3
    particles = _lattice_particles(gammas, M, hw, sigma0)
    return SimState(particles, 0.0, params, M, sigma0, overlap_ratio)


# ============================================================================
# RATE EVALUATION
# ============================================================================

RateFunction = Callable[[ParticleSet], ParticleResult]


def serial_rates(engine: FmmEngine) -> RateFunction:
    return engine.evaluate


def distributed_rates(engine: FmmEngine, comm: Communicator, partitions) -> RateFunction:
    """Rates of this rank's particles with the LET-overlapped evaluation."""

    def evaluate(particles):
        covering = covering_partitions(comm, partitions, particles)
        result, _ = engine.evaluate_distributed(comm, particles, covering)
        return result

    return evaluate


def _physical(result: ParticleResult):
    return -result.velocity, -result.dgamma_dt


# ============================================================================
# TIME STEPPING
# ============================================================================

def _wrap(positions, half_width):
    period = 2.0 * half_width
    return positions - period * np.floor((positions + half_width) / period)


def step(state: SimState, engine: FmmEngine, rates: Optional[RateFunction] = None, timers=None) -> SimState:
    """
    One Heun RK2 step of convection and stretching plus exact core spreading.

    The second stage is evaluated with the spread cores sigma^2 + 2 nu dt,
    which is also the final core size. Positions wrap into the periodic box
    when the engine is periodic. Exceeding max|u| dt > h is logged as a
    warning.
    """
    timers = timers or NullTimers()
    rates = rates or serial_rates(engine)
    params = state.params
    dt, hw = params.dt, params.domain_half_width
    periodic = engine.config.periodic
    p0 = state.particles

    u1, g1 = _physical(rates(p0))
    with timers.measure(Category.PARTICLE_UPDATE):
        sigmas = np.sqrt(p0.sigmas ** 2 + 2.0 * params.nu * dt)
        x_star = p0.positions + dt * u1
        stage = ParticleSet(_wrap(x_star, hw) if periodic else x_star, p0.gammas + dt * g1, sigmas, p0.ids)

    u2, g2 = _physical(rates(stage))
    with timers.measure(Category.PARTICLE_UPDATE):
        positions = p0.positions + 0.5 * dt * (u1 + u2)
        if periodic:
            positions = _wrap(positions, hw)
        gammas = p0.gammas + 0.5 * dt * (g1 + g2)
        particles = ParticleSet(positions, gammas, sigmas, p0.ids)

    u_max = float(np.sqrt(np.sum(u1 * u1, axis=1)).max()) if len(p0) else 0.0
    if u_max * dt > state.h:
        get_logger().child("vortex").warning(
            f"CFL exceeded at t={state.time:.4g}: max|u|*dt = {u_max * dt:.3g} > h = {state.h:.3g}")
    return replace(state, particles=particles, time=state.time + dt, step_count=state.step_count + 1)


def advance(state: SimState, engine: FmmEngine, steps: int, reinit_every: int = FlowDefaults.REINIT_EVERY,
            rates: Optional[RateFunction] = None, timers=None, on_step: Callable = None) -> SimState:
    """Run ``steps`` steps, reinitializing every ``reinit_every`` steps (0 disables)."""
    for _ in range(steps):
        state = step(state, engine, rates, timers)
        if reinit_every and state.step_count % reinit_every == 0:
            state = reinitialize(state)
        if on_step is not None:
            on_step(state)
    return state


# ============================================================================
# REINITIALIZATION
# ============================================================================

def _lattice_kernel(M, sigma, half_width):
    nodes = lattice_axis(M, half_width)
    period = 2.0 * half_width
    d = nodes - nodes[0]
    d -= period * np.round(d / period)
    w = np.exp(-0.5 * (d / sigma) ** 2)
    return (2.0 * math.pi * sigma ** 2) ** -1.5 * w[:, None, None] * w[None, :, None] * w[None, None, :]


def rbf_strengths(omega, sigma0: float, half_width: float = math.pi, tol: float = FlowDefaults.RBF_TOLERANCE,
                  max_iterations: int = FlowDefaults.RBF_MAX_ITERATIONS) -> np.ndarray:
    """
    Strengths of lattice particles with core sigma0 whose Gaussian field
    equals ``omega`` at the nodes.

    The collocation matrix of equal Gaussians on a periodic lattice is a
    circulant, so products are periodic convolutions done by FFT. Each
    component is solved by Jacobi-scaled conjugate gradients.

    Args:
        omega: (3, M, M, M) nodal vorticity
        sigma0: core radius of the new particles

    Returns:
        np.ndarray: (M^3, 3) strengths in lattice_points order

    Raises:
        ConvergenceError: a component missed ``tol`` within ``max_iterations``
    """
    omega = np.asarray(omega, dtype=np.float64)
    M = omega.shape[-1]
    n = M ** 3
    h = 2.0 * half_width / M
    kernel = _lattice_kernel(M, sigma0, half_width)
    kernel_hat = to_spectral(kernel)
    diagonal = kernel[0, 0, 0]

    def matvec(g):
        return to_physical(to_spectral(np.asarray(g).reshape(M, M, M)) * kernel_hat).ravel()

    A = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    jacobi = LinearOperator((n, n), matvec=lambda r: np.asarray(r) / diagonal, dtype=np.float64)

    gammas = np.zeros((n, 3))
    logger = get_logger().child("vortex")
    for c in range(3):
        b = omega[c].ravel()
        b_norm = np.linalg.norm(b)
        if b_norm == 0.0:
            continue
        iterations = [0]

        def count(_):
            iterations[0] += 1

        x, info = cg(A, b, x0=b * h ** 3, rtol=tol, maxiter=max_iterations, M=jacobi, callback=count)
        residual = float(np.linalg.norm(b - matvec(x)) / b_norm)
        if info != 0:
            raise ConvergenceError(f"RBF solve for component {c} did not converge", residual, iterations[0])
        logger.debug(f"RBF component {c}: {iterations[0]} iterations, residual {residual:.2e}")
        gammas[:, c] = x
    return gammas


def reinitialize(state: SimState, comm: Optional[Communicator] = None, partitions: Optional[List[Partition]] = None,
                 tol: float = FlowDefaults.RBF_TOLERANCE,
                 max_iterations: int = FlowDefaults.RBF_MAX_ITERATIONS) -> SimState:
    """
    Replace the particles by lattice particles with core sigma0.

    With ``comm`` every rank deposits its own particles, the nodal field is
    summed over ranks, every rank solves the same system and keeps the new
    lattice particles inside its own box of ``partitions``.

    Raises:
        InvalidInputError: ``comm`` spans several ranks but no partitions are given
    """
    distributed = comm is not None and comm.size > 1
    if distributed and partitions is None:
        raise InvalidInputError("distributed reinitialization needs the rank partitions")
    hw = state.params.domain_half_width
    M = state.lattice_n
    omega = vorticity_on_lattice(state.particles, M, hw).values
    if distributed:
        omega = comm.allreduce_sum(omega)
    gammas = rbf_strengths(omega, state.sigma0, hw, tol, max_iterations)
    particles = _lattice_particles(gammas, M, hw, state.sigma0)
    if distributed:
        particles = particles.subset(assign_to_partitions(partitions, particles.positions) == comm.rank)
    return replace(state, particles=particles)


# ============================================================================
# LATTICE DIAGNOSTICS
# ============================================================================

def velocity_on_lattice(particles: ParticleSet, M: int, engine: FmmEngine, physical: bool = False,
                        time: float = 0.0) -> LatticeField:
    """
    Velocity induced by ``particles`` at the M^3 lattice nodes.

    Lattice nodes are passive targets. By default the field follows the
    kernel sign of biot_savart_direct; ``physical`` returns the flow velocity.
    """
    hw = engine.config.domain_half_width
    nodes = lattice_points(M, hw)
    if len(particles) == 0:
        return LatticeField(np.zeros((3, M, M, M)), hw, time)
    probes = ParticleSet(nodes, np.zeros_like(nodes), 2.0 * hw / M)
    velocity = engine.evaluate(probes, particles).velocity
    if physical:
        velocity = -velocity
    return LatticeField(velocity.T.reshape(3, M, M, M).copy(), hw, time)


def lattice_spectrum(state: SimState, engine: FmmEngine) -> EnergySpectrum:
    """Energy spectrum of the particle velocity sampled on the state's lattice."""
    return energy_spectrum(velocity_on_lattice(state.particles, state.lattice_n, engine, physical=True, time=state.time))
