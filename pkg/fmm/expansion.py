"""
Multipole and local expansions of the three vector-potential components
psi_c(x) = sum_j gamma_{j,c} / |x - x_j| and the six FMM kernels.

Velocity and stretching at a target come from the first and second
derivatives of the local series (the 1/(4 pi) factor is applied in l2p).
Harmonic conventions are documented in fmm.harmonics.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fmm import harmonics as hm
from fmm.errors import InvalidInputError, OrderMismatchError
from fmm.model import FOUR_PI, ParticleResult, ParticleSet, interact_block

# complex entries of one dense operator batch
_OPERATOR_BUDGET = 1 << 22

LEVI_CIVITA = np.zeros((3, 3, 3))
LEVI_CIVITA[0, 1, 2] = LEVI_CIVITA[1, 2, 0] = LEVI_CIVITA[2, 0, 1] = 1.0
LEVI_CIVITA[0, 2, 1] = LEVI_CIVITA[2, 1, 0] = LEVI_CIVITA[1, 0, 2] = -1.0


@dataclass(frozen=True)
class PrecisionPolicy:
    """
    Storage precision of expansion coefficients.

    Attributes:
        storage: 'double' or 'single'
        ordered_accumulation: evaluate series from degree p-1 down to 0
        normalized: store coefficients scaled by scale**n (multipoles divide,
            locals multiply) so their magnitudes stay O(1)
    """
    storage: str = "double"
    ordered_accumulation: bool = False
    normalized: bool = False

    def __post_init__(self):
        if self.storage not in ("single", "double"):
            raise InvalidInputError(f"storage must be 'single' or 'double', got {self.storage!r}")

    @property
    def complex_dtype(self):
        return np.complex64 if self.storage == "single" else np.complex128

    @property
    def real_dtype(self):
        return np.float32 if self.storage == "single" else np.float64

    @classmethod
    def single_stabilized(cls):
        return cls(storage="single", ordered_accumulation=True, normalized=True)


DOUBLE = PrecisionPolicy()


def _scale_factors(scales, sign, p):
    scales = np.asarray(scales, dtype=np.float64)
    scales = np.where(scales > 0, scales, 1.0)
    return scales[..., None, None] ** (sign * hm.tri_degrees(p))


def store_coefficients(raw, scales, sign, p, policy):
    """
    Raw complex128 coefficients (..., 3, T) to their stored form under ``policy``.

    ``sign`` is -1 for multipoles (divide by scale^n) and +1 for locals.
    """
    raw = np.asarray(raw, dtype=np.complex128)
    if policy.normalized:
        raw = raw * _scale_factors(scales, sign, p)
    return raw.astype(policy.complex_dtype)


def load_coefficients(stored, scales, sign, p, policy):
    """Inverse of store_coefficients (returns complex128)."""
    raw = np.asarray(stored).astype(np.complex128)
    if policy.normalized:
        raw = raw * _scale_factors(scales, -sign, p)
    return raw


@dataclass
class _Expansion:
    order_p: int
    coeffs: np.ndarray          # (3, p(p+1)/2) stored (possibly normalized / single)
    center: np.ndarray
    scale: float = 1.0
    policy: PrecisionPolicy = field(default=DOUBLE)

    _sign = 0  # -1 for multipoles (divide by scale^n), +1 for locals

    @classmethod
    def from_raw(cls, raw, center, p, scale=1.0, policy=DOUBLE):
        """Store raw complex128 coefficients under ``policy``."""
        if p < 1:
            raise InvalidInputError(f"expansion order must be >= 1, got {p}")
        scale = float(scale) if scale > 0 else 1.0
        raw = np.asarray(raw, dtype=np.complex128).reshape(3, hm.tri_size(p))
        stored = store_coefficients(raw, scale, cls._sign, p, policy)
        return cls(p, stored, np.asarray(center, dtype=np.float64).copy(), scale, policy)

    @classmethod
    def zeros(cls, center, p, scale=1.0, policy=DOUBLE):
        return cls.from_raw(np.zeros((3, hm.tri_size(p))), center, p, scale, policy)

    def raw(self):
        """Coefficients as unnormalized complex128, shape (3, p(p+1)/2)."""
        return load_coefficients(self.coeffs, self.scale, self._sign, self.order_p, self.policy)

    def full(self):
        return hm.to_full(self.raw(), self.order_p)

    @property
    def coefficient_count(self):
        return self.coeffs.shape[1]

    def __add__(self, other):
        _check_order(self, other)
        return type(self).from_raw(self.raw() + other.raw(), self.center, self.order_p, self.scale, self.policy)


class Multipole(_Expansion):
    """Multipole expansion M_n^m about ``center`` (one set per gamma component)."""
    _sign = -1


class Local(_Expansion):
    """Local expansion L_n^m about ``center``."""
    _sign = 1


def _check_order(a, b):
    if a.order_p != b.order_p:
        raise OrderMismatchError(f"expansion orders differ: {a.order_p} vs {b.order_p}")


def _chunks(total, per_item):
    step = max(1, _OPERATOR_BUDGET // max(per_item, 1))
    for start in range(0, total, step):
        yield start, min(total, start + step)


# ============================================================================
# BATCHED RAW OPERATORS (complex128, unnormalized)
# ============================================================================

def p2m_raw(rel_positions, gammas, p):
    """Raw multipole (3, T) of particles at ``rel_positions`` from the center."""
    a = hm.regular_tri(rel_positions, p)
    return np.einsum("jc,jt->ct", np.asarray(gammas, dtype=np.float64), a)


def m2m_raw_batch(coeffs, offsets, p):
    """
    Translate raw multipoles by ``offsets`` = old_center - new_center.

    Args:
        coeffs: (B, 3, T) raw multipoles
        offsets: (B, 3)
        p: order

    Returns:
        np.ndarray: (B, 3, T)
    """
    return _shift_batch(coeffs, offsets, p, hm.shift_table(p))


def l2l_raw_batch(coeffs, offsets, p):
    """Shift raw locals by ``offsets`` = new_center - old_center."""
    return _shift_batch(coeffs, offsets, p, hm.local_shift_table(p))


def _shift_batch(coeffs, offsets, p, table):
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    n_tri = hm.tri_size(p)
    n_full = p * (2 * p - 1)
    out = np.empty_like(coeffs)
    for lo, hi in _chunks(len(offsets), n_tri * n_full):
        a_full = hm.to_full(hm.regular_tri(offsets[lo:hi], p), p).reshape(hi - lo, -1)
        op = hm.dense_operator(a_full, table, n_tri, n_full)
        src = hm.to_full(coeffs[lo:hi], p).reshape(hi - lo, 3, n_full)
        out[lo:hi] = np.einsum("btf,bcf->bct", op, src)
    return out


def m2l_raw_batch(coeffs, offsets, p):
    """
    Convert raw multipoles to raw locals.

    Args:
        coeffs: (B, 3, T) raw multipoles
        offsets: (B, 3) target_center - source_center, nonzero
        p: order

    Returns:
        np.ndarray: (B, 3, T) raw locals
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    if np.any(np.einsum("bk,bk->b", offsets, offsets) == 0.0):
        raise InvalidInputError("m2l: source and target centers coincide")
    table = hm.m2l_table(p)
    n_tri = hm.tri_size(p)
    n_full = p * (2 * p - 1)
    s_deg = 2 * p - 1
    out = np.empty_like(coeffs)
    for lo, hi in _chunks(len(offsets), n_tri * n_full):
        s_full = hm.to_full(hm.irregular_tri(offsets[lo:hi], s_deg), s_deg).reshape(hi - lo, -1)
        op = hm.dense_operator(s_full, table, n_tri, n_full, sign=table[3])
        src = hm.to_full(coeffs[lo:hi], p).reshape(hi - lo, 3, n_full)
        out[lo:hi] = np.einsum("btf,bcf->bct", op, src)
    return out


# ============================================================================
# SINGLE-EXPANSION OPERATORS
# ============================================================================

def p2m(particles: ParticleSet, center, p: int, scale: Optional[float] = None, policy: PrecisionPolicy = DOUBLE):
    """
    Particle-to-multipole.

    Args:
        particles: nonempty ParticleSet
        center: expansion center
        p: order (>= 1)
        scale: normalization radius (defaults to the farthest particle distance)
        policy: coefficient storage policy

    Returns:
        Multipole
    """
    if p < 1:
        raise InvalidInputError(f"p must be >= 1, got {p}")
    if len(particles) == 0:
        raise InvalidInputError("p2m requires at least one particle")
    center = np.asarray(center, dtype=np.float64)
    rel = particles.positions - center
    if scale is None:
        scale = float(np.sqrt(np.max(np.einsum("jk,jk->j", rel, rel))))
    raw = p2m_raw(rel, particles.gammas, p)
    return Multipole.from_raw(raw, center, p, scale, policy)


def m2m(child: Multipole, new_center, scale: Optional[float] = None):
    """Multipole-to-multipole translation (exact for the truncated set)."""
    new_center = np.asarray(new_center, dtype=np.float64)
    raw = m2m_raw_batch(child.raw()[None], (child.center - new_center)[None], child.order_p)[0]
    return Multipole.from_raw(raw, new_center, child.order_p, child.scale if scale is None else scale, child.policy)


def m2l(source: Multipole, target_center, scale: Optional[float] = None):
    """Multipole-to-local conversion about ``target_center``."""
    target_center = np.asarray(target_center, dtype=np.float64)
    raw = m2l_raw_batch(source.raw()[None], (target_center - source.center)[None], source.order_p)[0]
    return Local.from_raw(raw, target_center, source.order_p, source.scale if scale is None else scale,
                          source.policy)


def l2l(parent: Local, new_center, scale: Optional[float] = None):
    """Local-to-local shift."""
    new_center = np.asarray(new_center, dtype=np.float64)
    raw = l2l_raw_batch(parent.raw()[None], (new_center - parent.center)[None], parent.order_p)[0]
    return Local.from_raw(raw, new_center, parent.order_p, parent.scale if scale is None else scale, parent.policy)


def add_expansions(a, b):
    """Sum of two expansions about the same center (orders must match)."""
    _check_order(a, b)
    return a + b


# ============================================================================
# EVALUATION
# ============================================================================

def _series_sum(coef, harm, p, policy):
    """
    Real part of sum_{n,m} coef * harm, accumulated per degree.

    Args:
        coef: (..., K, p, W) coefficients (K derivative sets)
        harm: (N, p, W) harmonics at the targets
    Returns:
        (N, ..., K) real
    """
    # per-degree partial sums
    partial = np.einsum("...knw,inw->i...kn", coef, harm).real.astype(policy.real_dtype)
    degrees = range(p - 1, -1, -1) if policy.ordered_accumulation else range(p)
    acc = np.zeros(partial.shape[:-1], dtype=policy.real_dtype)
    for n in degrees:
        acc = acc + partial[..., n]
    return acc


def local_fields(local: Local, points):
    """
    Gradient and Hessian of the three potential components of a local series.

    Args:
        local: Local expansion
        points: (N, 3) evaluation points

    Returns:
        tuple: grad (N, 3, 3) [component, d], hess (N, 3, 3, 3) [component, d, e]
    """
    p = local.order_p
    policy = local.policy
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    s = local.scale if policy.normalized else 1.0

    # stored coefficients are already normalized by scale^n when requested
    coeffs = local.coeffs if policy.normalized else local.raw()
    full = hm.to_full(coeffs, p).astype(policy.complex_dtype)          # (3, p, W)
    first = hm.derivative_coefficients(full)                           # (3, 3, p, W)
    second = hm.derivative_coefficients(first)                         # (3, 3, 3, p, W)

    harm = hm.to_full(hm.regular_tri((points - local.center) / s, p), p).astype(policy.complex_dtype)

    grad = _series_sum(first, harm, p, policy).astype(np.float64) / s
    hess = _series_sum(second.reshape(3, 9, p, -1), harm, p, policy).astype(np.float64) / (s * s)
    return grad, hess.reshape(-1, 3, 3, 3)


def fields_to_result(grad, hess, target_gammas):
    """
    Kernel velocity and stretching from potential derivatives.

    u_a = (1/4pi) eps_abc d_c psi_b
    (dgamma/dt)_a = (1/4pi) gamma_d eps_abc d_d d_c psi_b
    """
    velocity = np.einsum("abc,ibc->ia", LEVI_CIVITA, grad) / FOUR_PI
    dgamma = np.einsum("abc,id,ibdc->ia", LEVI_CIVITA, np.asarray(target_gammas), hess) / FOUR_PI
    return velocity, dgamma


def l2p(local: Local, particles: ParticleSet) -> ParticleResult:
    """
    Local-to-particle evaluation of velocity and stretching.

    Args:
        local: Local expansion whose validity region holds the particles
        particles: targets (their gammas drive the stretching term)

    Returns:
        ParticleResult
    """
    grad, hess = local_fields(local, particles.positions)
    velocity, dgamma = fields_to_result(grad, hess, particles.gammas)
    if not (np.all(np.isfinite(velocity)) and np.all(np.isfinite(dgamma))):
        raise InvalidInputError("l2p produced non-finite values")
    return ParticleResult(velocity, dgamma)


def multipole_fields(multipole: Multipole, points):
    """
    Direct evaluation of a multipole series at far points.

    Uses dS_n^m/dz = -S_{n+1}^m, dS_n^m/dx = -(i/2)(S_{n+1}^{m+1} + S_{n+1}^{m-1}),
    dS_n^m/dy = -(1/2)(S_{n+1}^{m+1} - S_{n+1}^{m-1}).

    Returns:
        tuple: grad (N, 3, 3) [component, d], potential (N, 3)
    """
    p = multipole.order_p
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = points - multipole.center
    s_full = hm.to_full(hm.irregular_tri(rel, p + 1), p + 1)       # (N, p+1, 2p+1)
    m_full = hm.to_full(multipole.raw(), p)                         # (3, p, 2p-1)

    same = s_full[:, :p, 1:2 * p]
    next_same = s_full[:, 1:, 1:2 * p]
    next_up = s_full[:, 1:, 2:]
    next_down = s_full[:, 1:, :2 * p - 1]

    potential = np.einsum("cnw,inw->ic", m_full, same).real
    ds = np.stack([-0.5j * (next_up + next_down), -0.5 * (next_up - next_down), -next_same], axis=1)
    grad = np.einsum("cnw,idnw->icd", m_full, ds).real
    return grad, potential

def multipole_velocity(multipole: Multipole, points):
    """Kernel velocity of a multipole series at far points."""
    grad, _ = multipole_fields(multipole, points)
    return np.einsum("abc,ibc->ia", LEVI_CIVITA, grad) / FOUR_PI


# ============================================================================
# NEAR FIELD
# ============================================================================

def p2p(targets: ParticleSet, sources: ParticleSet, offset=None) -> ParticleResult:
    """
    Particle-to-particle interaction with the Gaussian cutoff.

    Same formula and summation order as the direct oracle; the pair counters
    grow by targets x sources (174 model flops per pair).
    """
    velocity, dgamma = interact_block(targets.positions, targets.gammas, targets.ids,
                                      sources.positions, sources.gammas, sources.sigmas, sources.ids,
                                      use_cutoff=True, want_stretching=True, offset=offset)
    pairs = len(targets) * len(sources)
    return ParticleResult(velocity, dgamma, pairs, pairs)
