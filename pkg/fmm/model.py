"""
Core physical types and direct O(N^2) evaluation of the regularized
Biot-Savart and stretching formulas.

Sign convention: the gradient in the kernel is taken with respect to the
target coordinate, so one source with gamma = z at the origin induces
(0, -1/(4 pi), 0) at (1, 0, 0). Everything in the FMM reproduces these
functions; they are the oracle for the rest of the package.
"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np
from scipy.special import erf

from fmm.constants import Flops
from fmm.errors import InvalidInputError, SingularKernelError

FOUR_PI = 4.0 * math.pi
TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)

# below this rho the cutoff factors use their Taylor series
_SMALL_RHO = 0.05
# targets x sources per vectorized block
_BLOCK_PAIRS = 1 << 20


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True)
class Particle:
    """A single vortex particle."""
    position: tuple
    gamma: tuple
    sigma: float
    id: int

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise InvalidInputError(f"particle {self.id}: sigma must be positive and finite, got {self.sigma}")


class ParticleSet:
    """
    Struct-of-arrays particle container.

    Attributes:
        positions: (N, 3) float64
        gammas: (N, 3) float64 vector strengths
        sigmas: (N,) float64 core radii
        ids: (N,) int64 unique tags
    """

    def __init__(self, positions, gammas, sigmas, ids=None):
        positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        gammas = np.ascontiguousarray(gammas, dtype=np.float64).reshape(n, 3)
        sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,)).copy()
        if ids is None:
            ids = np.arange(n, dtype=np.int64)
        ids = np.ascontiguousarray(ids, dtype=np.int64).reshape(n)

        if np.any(sigmas <= 0):
            raise InvalidInputError("sigma must be > 0 for every particle")

        self.positions = positions
        self.gammas = gammas
        self.sigmas = sigmas
        self.ids = ids

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return f"ParticleSet(n={len(self)})"

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_particles(cls, particles: Iterable[Particle]):
        particles = list(particles)
        if not particles:
            return cls.empty()
        return cls(
            [p.position for p in particles],
            [p.gamma for p in particles],
            [p.sigma for p in particles],
            [p.id for p in particles],
        )

    @classmethod
    def concatenate(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.positions for s in sets]),
            np.concatenate([s.gammas for s in sets]),
            np.concatenate([s.sigmas for s in sets]),
            np.concatenate([s.ids for s in sets]),
        )

    def to_particles(self) -> List[Particle]:
        return [
            Particle(tuple(self.positions[i]), tuple(self.gammas[i]), float(self.sigmas[i]), int(self.ids[i]))
            for i in range(len(self))
        ]

    def subset(self, index):
        """Return a copy restricted to ``index`` (slice, mask or index array)."""
        return ParticleSet(self.positions[index], self.gammas[index], self.sigmas[index], self.ids[index])

    def copy(self):
        return self.subset(slice(None))

    def check_finite(self):
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.gammas))
                and np.all(np.isfinite(self.sigmas))):
            raise InvalidInputError("particle data contains non-finite values")


@dataclass
class ParticleResult:
    """
    Per-target velocity and stretching rate plus model flop counters.

    Results over disjoint source sets add: ``a + b`` sums the fields and the
    pair counters.
    """
    velocity: np.ndarray
    dgamma_dt: np.ndarray
    pairs_biot_savart: int = 0
    pairs_stretching: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 3)))

    @property
    def accumulation_flops(self) -> int:
        return Flops.BIOT_SAVART * self.pairs_biot_savart + Flops.STRETCHING * self.pairs_stretching

    def __add__(self, other):
        return ParticleResult(
            self.velocity + other.velocity,
            self.dgamma_dt + other.dgamma_dt,
            self.pairs_biot_savart + other.pairs_biot_savart,
            self.pairs_stretching + other.pairs_stretching,
        )

    def add_into(self, index, velocity, dgamma_dt):
        """Accumulate partial results for the targets at ``index``."""
        np.add.at(self.velocity, index, velocity)
        np.add.at(self.dgamma_dt, index, dgamma_dt)


@dataclass
class FlowParams:
    """Physical parameters of the flow."""
    nu: float = 0.0
    domain_half_width: float = math.pi
    dt: float = 0.01

    def __post_init__(self):
        if not (self.nu >= 0):
            raise InvalidInputError(f"nu must be >= 0, got {self.nu}")
        if not (self.domain_half_width > 0):
            raise InvalidInputError(f"domain_half_width must be > 0, got {self.domain_half_width}")
        if not (self.dt > 0):
            raise InvalidInputError(f"dt must be > 0, got {self.dt}")

    @property
    def period(self):
        return 2.0 * self.domain_half_width


# ============================================================================
# CUTOFF FUNCTION
# ============================================================================

def cutoff_g(r, sigma):
    """
    Gaussian cutoff g(r) = erf(rho) - (2/sqrt(pi)) rho exp(-rho^2),
    rho = r / (sqrt(2) sigma).

    Args:
        r: Distance(s), >= 0
        sigma: Core radius (radii), > 0

    Returns:
        float or np.ndarray: values in [0, 1)
    """
    r = np.asarray(r, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(sigma))):
        raise InvalidInputError("cutoff_g: non-finite input")
    if np.any(r < 0) or np.any(sigma <= 0):
        raise InvalidInputError("cutoff_g: requires r >= 0 and sigma > 0")
    rho = r / (math.sqrt(2.0) * sigma)
    g = erf(rho) - TWO_OVER_SQRT_PI * rho * np.exp(-rho * rho)
    g = np.where(rho < _SMALL_RHO, TWO_OVER_SQRT_PI * rho ** 3 * _g_over_rho3_series(rho), g)
    g = np.maximum(g, 0.0)
    return g if g.ndim else float(g)


def _g_over_rho3_series(rho):
    # (sqrt(pi)/2) * g / rho^3 for small rho
    rho2 = rho * rho
    return 2.0 / 3.0 - rho2 * (2.0 / 5.0 - rho2 * (1.0 / 7.0 - rho2 / 27.0))


def _kernel_factors(r, sigma, use_cutoff):
    """
    Radial factors F(r) = g / (4 pi r^3) and H(r) = (r g' - 3 g) / (4 pi r^5).

    Velocity uses F (d x gamma); the stretching term adds
    H (gamma_t . d)(d x gamma) + F (gamma_t x gamma).
    """
    if not use_cutoff:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_r = np.where(r > 0, 1.0 / np.where(r > 0, r, 1.0), 0.0)
        inv_r3 = inv_r ** 3
        return inv_r3 / FOUR_PI, -3.0 * inv_r3 * inv_r * inv_r / FOUR_PI

    s = math.sqrt(2.0) * np.asarray(sigma, dtype=np.float64)
    rho = r / s
    small = rho < _SMALL_RHO
    rho_safe = np.where(small, 1.0, rho)
    rho2 = rho * rho

    g = erf(rho_safe) - TWO_OVER_SQRT_PI * rho_safe * np.exp(-rho_safe * rho_safe)
    g_over_rho3 = np.where(small, TWO_OVER_SQRT_PI * _g_over_rho3_series(rho), g / rho_safe ** 3)

    num = 2.0 * TWO_OVER_SQRT_PI * rho_safe ** 3 * np.exp(-rho_safe * rho_safe) - 3.0 * g
    h_series = INV_SQRT_PI * (-8.0 / 5.0 + rho2 * (8.0 / 7.0 - rho2 * 4.0 / 9.0))
    h_over_rho5 = np.where(small, h_series, num / rho_safe ** 5)

    s3 = s ** 3
    F = g_over_rho3 / (FOUR_PI * s3)
    H = h_over_rho5 / (FOUR_PI * s3 * s * s)
    return F, H


# ============================================================================
# PAIRWISE BLOCK KERNEL
# ============================================================================

def interact_block(target_pos, target_gamma, target_ids, src_pos, src_gamma, src_sigma, src_ids,
                   use_cutoff=True, want_stretching=True, offset=None):
    """
    Evaluate all (target, source) pairs of one block.

    Args:
        target_pos, target_gamma: (T, 3) arrays
        target_ids: (T,) ids (used to skip self pairs of the singular kernel)
        src_pos, src_gamma: (S, 3) arrays
        src_sigma: (S,) core radii
        src_ids: (S,) ids
        use_cutoff: apply the Gaussian cutoff
        want_stretching: also compute dgamma/dt
        offset: optional 3-vector added to every source position (periodic image)

    Returns:
        tuple: (velocity (T,3), dgamma_dt (T,3) or None)
    """
    n_t = target_pos.shape[0]
    n_s = src_pos.shape[0]
    velocity = np.zeros((n_t, 3))
    dgamma = np.zeros((n_t, 3)) if want_stretching else None
    if n_t == 0 or n_s == 0:
        return velocity, dgamma

    if offset is not None:
        src_pos = src_pos + np.asarray(offset, dtype=np.float64)

    rows = max(1, _BLOCK_PAIRS // max(n_s, 1))
    for start in range(0, n_t, rows):
        stop = min(n_t, start + rows)
        d = target_pos[start:stop, None, :] - src_pos[None, :, :]
        r = np.sqrt(np.einsum("tsk,tsk->ts", d, d))

        if use_cutoff:
            F, H = _kernel_factors(r, src_sigma[None, :], True)
        else:
            same = target_ids[start:stop, None] == src_ids[None, :]
            clash = (r == 0.0) & ~same
            if np.any(clash):
                t, s = np.argwhere(clash)[0]
                raise SingularKernelError(
                    f"particles {int(target_ids[start + t])} and {int(src_ids[s])} coincide under the singular kernel")
            F, H = _kernel_factors(r, None, False)
            F = np.where(same, 0.0, F)
            H = np.where(same, 0.0, H)

        dxg = np.cross(d, src_gamma[None, :, :])
        velocity[start:stop] = np.einsum("ts,tsk->tk", F, dxg)

        if want_stretching:
            gt = target_gamma[start:stop]
            proj = np.einsum("tk,tsk->ts", gt, d)
            dgamma[start:stop] = np.einsum("ts,tsk->tk", H * proj, dxg) + np.cross(gt, F @ src_gamma)

    return velocity, dgamma


# ============================================================================
# DIRECT (ORACLE) OPERATIONS
# ============================================================================

def _as_set(particles) -> ParticleSet:
    if isinstance(particles, ParticleSet):
        return particles
    return ParticleSet.from_particles(particles)


def biot_savart_direct(targets, sources, use_cutoff: bool) -> np.ndarray:
    """
    Velocity u_i = sum_j gamma_j x grad G g_sigma with G = 1/(4 pi r).

    Args:
        targets: ParticleSet or list of Particle
        sources: ParticleSet or list of Particle
        use_cutoff: apply the Gaussian cutoff; when unset the j == i term
            (matching id) is skipped

    Returns:
        np.ndarray: (N_targets, 3) velocities
    """
    t = _as_set(targets)
    s = _as_set(sources)
    t.check_finite()
    s.check_finite()
    velocity, _ = interact_block(t.positions, t.gammas, t.ids, s.positions, s.gammas, s.sigmas, s.ids,
                                 use_cutoff=use_cutoff, want_stretching=False)
    return velocity


def stretching_direct(targets, sources, use_cutoff: bool = True) -> np.ndarray:
    """
    Stretching rate dgamma_i/dt = (gamma_i . grad) u evaluated at x_i.

    Args:
        targets: particles carrying their own gamma_i
        sources: source particles
        use_cutoff: apply the Gaussian cutoff (default)

    Returns:
        np.ndarray: (N_targets, 3)
    """
    t = _as_set(targets)
    s = _as_set(sources)
    t.check_finite()
    s.check_finite()
    _, dgamma = interact_block(t.positions, t.gammas, t.ids, s.positions, s.gammas, s.sigmas, s.ids,
                               use_cutoff=use_cutoff, want_stretching=True)
    return dgamma


def direct_result(targets, sources, use_cutoff: bool = True, offsets: Optional[Iterable] = None) -> ParticleResult:
    """
    Velocity and stretching together, optionally summed over periodic image offsets.

    Returns:
        ParticleResult: with pair counters set to targets x sources x images
    """
    t = _as_set(targets)
    s = _as_set(sources)
    t.check_finite()
    s.check_finite()
    offsets = [None] if offsets is None else list(offsets)
    result = ParticleResult.zeros(len(t))
    for off in offsets:
        v, dg = interact_block(t.positions, t.gammas, t.ids, s.positions, s.gammas, s.sigmas, s.ids,
                               use_cutoff=use_cutoff, want_stretching=True, offset=off)
        result.velocity += v
        result.dgamma_dt += dg
    pairs = len(t) * len(s) * len(offsets)
    result.pairs_biot_savart = pairs
    result.pairs_stretching = pairs
    return result
