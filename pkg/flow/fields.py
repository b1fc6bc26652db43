"""
Lattice fields shared by the vortex and spectral solvers.

Conventions:
    - lattice nodes x_i = -L/2 + i h, h = L / M, arrays indexed [ix, iy, iz]
    - vector fields are stored component first, shape (3, M, M, M)
    - forward FFT unscaled, inverse scaled by 1/M^3 (scipy.fft defaults)

File formats (little-endian):
    snapshot: {u64 magic "VPM1", u64 N, f64 time} then N x 7 f64
              (x, y, z, gx, gy, gz, sigma)
    field:    {u64 magic "FLD1", u64 M, f64 time} then M^3 (scalar) or
              3 M^3 (vector, component by component) f64 in x-fastest order
    spectrum: CSV, '#' header lines, then "k,E"
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.fft as spfft

from fmm.constants import FlowDefaults, WireFormat
from fmm.errors import InvalidInputError, PayloadDecodeError
from fmm.model import ParticleSet

SNAPSHOT_HEADER = np.dtype([("magic", "<u8"), ("count", "<u8"), ("time", "<f8")])
FIELD_HEADER = np.dtype([("magic", "<u8"), ("size", "<u8"), ("time", "<f8")])

# particles x M^2 weights held at once by the lattice deposit
_DEPOSIT_BUDGET = 1 << 22


# ============================================================================
# LATTICE
# ============================================================================

@dataclass
class LatticeField:
    """Scalar (M, M, M) or vector (3, M, M, M) samples on the periodic lattice."""
    values: np.ndarray
    half_width: float = math.pi
    time: float = 0.0

    @property
    def M(self):
        return self.values.shape[-1]

    @property
    def h(self):
        return 2.0 * self.half_width / self.M

    @property
    def components(self):
        return 1 if self.values.ndim == 3 else self.values.shape[0]


def lattice_axis(M: int, half_width: float = math.pi) -> np.ndarray:
    return -half_width + (2.0 * half_width / M) * np.arange(M)


def lattice_points(M: int, half_width: float = math.pi) -> np.ndarray:
    """(M^3, 3) node positions, flattened in [ix, iy, iz] order."""
    axis = lattice_axis(M, half_width)
    X, Y, Z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def wavenumbers(M: int, half_width: float = math.pi) -> np.ndarray:
    """(3, M, M, M) angular wavenumbers in FFT order (integers for L = 2 pi)."""
    k = spfft.fftfreq(M, d=2.0 * half_width / M) * 2.0 * math.pi
    return np.stack(np.meshgrid(k, k, k, indexing="ij"))


def shell_index(K: np.ndarray, half_width: float = math.pi) -> np.ndarray:
    """Nearest-integer shell of every wavevector, in units of the fundamental 2 pi / L."""
    return np.rint(np.sqrt(np.sum(K * K, axis=0)) * half_width / math.pi).astype(np.int64)


def project_solenoidal(u_hat: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Remove the k-parallel part of every mode: u - k (k.u) / |k|^2."""
    K2 = np.sum(K * K, axis=0)
    K2 = np.where(K2 == 0, 1.0, K2)
    return u_hat - K * (np.sum(K * u_hat, axis=0) / K2)


def curl_hat(u_hat: np.ndarray, K: np.ndarray) -> np.ndarray:
    return 1j * np.stack([
        K[1] * u_hat[2] - K[2] * u_hat[1],
        K[2] * u_hat[0] - K[0] * u_hat[2],
        K[0] * u_hat[1] - K[1] * u_hat[0],
    ])


def to_physical(u_hat: np.ndarray) -> np.ndarray:
    return spfft.ifftn(u_hat, axes=(-3, -2, -1)).real


def to_spectral(u: np.ndarray) -> np.ndarray:
    return spfft.fftn(u, axes=(-3, -2, -1))


# ============================================================================
# INITIAL FIELD
# ============================================================================

@dataclass(frozen=True)
class SpectrumShape:
    """E(k) = amplitude * k^4 * exp(-2 (k / k_peak)^2)."""
    k_peak: float
    amplitude: float = 1.0

    def __call__(self, k):
        k = np.asarray(k, dtype=np.float64)
        return self.amplitude * k ** 4 * np.exp(-2.0 * (k / self.k_peak) ** 2)

    @classmethod
    def for_lattice(cls, M: int, energy: float = 0.5):
        """Peak at M / 8, scaled so the shells 1..M/3 hold ``energy``."""
        k_peak = M / FlowDefaults.SPECTRUM_PEAK_DIVISOR
        unit = cls(k_peak)(np.arange(1, max_shell(M) + 1)).sum()
        return cls(k_peak, energy / unit if unit > 0 else 0.0)


def max_shell(M: int) -> int:
    """Largest shell carried by the initial field (inside the 2/3 dealiasing cube)."""
    return M // 3


def initial_velocity_hat(spectrum: Callable, seed: int, M: int, half_width: float = math.pi) -> np.ndarray:
    """
    Random solenoidal velocity with a prescribed shell spectrum.

    Gaussian white noise is transformed, projected onto divergence-free
    modes and rescaled shell by shell, so one-point statistics stay
    Gaussian, conjugate symmetry is kept and the measured spectrum equals
    ``spectrum(k)`` on every populated shell k <= M/3. Nyquist planes and
    the mean are zero.

    Args:
        spectrum: callable E(k) evaluated at integer shells
        seed: random seed
        M: lattice size

    Returns:
        np.ndarray: (3, M, M, M) complex Fourier coefficients
    """
    if M < 2:
        raise InvalidInputError(f"lattice size must be >= 2, got {M}")
    kmax = max_shell(M)
    target = np.asarray(spectrum(np.arange(kmax + 1)), dtype=np.float64)
    if np.any(target < 0) or not np.all(np.isfinite(target)):
        raise InvalidInputError("energy spectrum must be finite and non-negative")

    rng = np.random.default_rng(seed)
    K = wavenumbers(M, half_width)
    u_hat = project_solenoidal(to_spectral(rng.standard_normal((3, M, M, M))), K)

    shells = shell_index(K, half_width)
    nyquist = np.zeros((M, M, M), dtype=bool)
    if M % 2 == 0:
        nyquist[M // 2] = True
        nyquist[:, M // 2] = True
        nyquist[:, :, M // 2] = True
    keep = (shells >= 1) & (shells <= kmax) & ~nyquist

    measured = np.bincount(shells[keep], weights=_mode_energy(u_hat, M)[keep], minlength=kmax + 1)
    gain = np.zeros(kmax + 1)
    populated = measured > 0
    gain[populated] = np.sqrt(target[populated] / measured[populated])
    factor = np.zeros((M, M, M))
    factor[keep] = gain[shells[keep]]
    return u_hat * factor


def _mode_energy(u_hat, M):
    return 0.5 * np.sum(np.abs(u_hat) ** 2, axis=0) / float(M) ** 6


# ============================================================================
# GAUSSIAN DEPOSIT
# ============================================================================

def _axis_weights(coord, sigma, nodes, period):
    d = nodes[None, :] - coord[:, None]
    if period is not None:
        d -= period * np.round(d / period)
    return np.exp(-0.5 * (d / sigma[:, None]) ** 2)


def gaussian_deposit(positions, strengths, sigmas, M: int, half_width: float = math.pi,
                     periodic: bool = True) -> np.ndarray:
    """
    sum_j s_j zeta_sigma_j(x - x_j) at every lattice node.

    zeta_sigma is the normalized Gaussian (2 pi sigma^2)^(-3/2)
    exp(-r^2 / (2 sigma^2)), the smoothing that matches the cutoff of the
    regularized kernel. The Gaussian factorizes per axis, so the deposit is
    a chunked contraction of three (n, M) weight tables. Periodic mode uses
    minimum-image displacements.

    Returns:
        np.ndarray: (C, M, M, M) for (n, C) strengths
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    strengths = np.asarray(strengths, dtype=np.float64).reshape(len(positions), -1)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(positions),))
    C = strengths.shape[1]
    nodes = lattice_axis(M, half_width)
    period = 2.0 * half_width if periodic else None

    out = np.zeros((M * M, M * C))
    chunk = max(1, _DEPOSIT_BUDGET // (M * M))
    for start in range(0, len(positions), chunk):
        sl = slice(start, start + chunk)
        pos, sig = positions[sl], sigmas[sl]
        scaled = strengths[sl] * ((2.0 * math.pi * sig ** 2) ** -1.5)[:, None]
        wx = _axis_weights(pos[:, 0], sig, nodes, period)
        wy = _axis_weights(pos[:, 1], sig, nodes, period)
        wz = _axis_weights(pos[:, 2], sig, nodes, period)
        wxy = (wx[:, :, None] * wy[:, None, :]).reshape(len(pos), M * M)
        wzs = (wz[:, :, None] * scaled[:, None, :]).reshape(len(pos), M * C)
        out += wxy.T @ wzs
    return np.moveaxis(out.reshape(M, M, M, C), -1, 0)


def vorticity_on_lattice(particles: ParticleSet, M: int, half_width: float = math.pi,
                         periodic: bool = True) -> LatticeField:
    """Gaussian-smoothed particle vorticity at the lattice nodes."""
    if len(particles) == 0:
        return LatticeField(np.zeros((3, M, M, M)), half_width)
    omega = gaussian_deposit(particles.positions, particles.gammas, particles.sigmas, M, half_width, periodic)
    return LatticeField(omega, half_width)


# ============================================================================
# SPECTRA
# ============================================================================

@dataclass
class EnergySpectrum:
    """Energy per integer wavenumber shell (k = 0, 1, ...)."""
    k: np.ndarray
    E: np.ndarray

    @property
    def total(self):
        return float(self.E.sum())

    def band(self, kmax):
        """Shells 1..kmax."""
        sel = (self.k >= 1) & (self.k <= kmax)
        return self.k[sel], self.E[sel]


def write_spectrum_csv(path, spectrum: EnergySpectrum, header_lines: Iterable[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write("k,E\n")
        for k, e in zip(spectrum.k, spectrum.E):
            f.write(f"{int(k)},{e:.17g}\n")
    return path


def read_spectrum_csv(path) -> EnergySpectrum:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    if not rows or rows[0].strip() != "k,E":
        raise PayloadDecodeError(f"{path}: missing 'k,E' header row")
    data = np.array([[float(v) for v in row.split(",")] for row in rows[1:]]).reshape(-1, 2)
    return EnergySpectrum(data[:, 0].astype(np.int64), data[:, 1])


# ============================================================================
# BINARY FILES
# ============================================================================

def _write_header(f, dtype, magic, count, time):
    header = np.zeros(1, dtype=dtype)
    header[0] = (magic, count, time)
    f.write(header.tobytes())


def _read_header(buffer, dtype, magic, path):
    if len(buffer) < dtype.itemsize:
        raise PayloadDecodeError(f"{path}: truncated header")
    header = np.frombuffer(buffer, dtype=dtype, count=1)[0]
    if int(header["magic"]) != magic:
        raise PayloadDecodeError(f"{path}: bad magic 0x{int(header['magic']):08X}")
    return header


def write_snapshot(path, particles: ParticleSet, time: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.empty((len(particles), 7), dtype="<f8")
    records[:, 0:3] = particles.positions
    records[:, 3:6] = particles.gammas
    records[:, 6] = particles.sigmas
    with open(path, "wb") as f:
        _write_header(f, SNAPSHOT_HEADER, WireFormat.SNAPSHOT_MAGIC, len(particles), time)
        f.write(records.tobytes())
    return path


def read_snapshot(path):
    """
    Returns:
        tuple: (ParticleSet with ids 0..N-1, time)
    """
    buffer = Path(path).read_bytes()
    header = _read_header(buffer, SNAPSHOT_HEADER, WireFormat.SNAPSHOT_MAGIC, path)
    n = int(header["count"])
    body = buffer[SNAPSHOT_HEADER.itemsize:]
    if len(body) != n * 7 * 8:
        raise PayloadDecodeError(f"{path}: expected {n} records, found {len(body)} bytes")
    records = np.frombuffer(body, dtype="<f8").reshape(n, 7)
    if n == 0:
        return ParticleSet.empty(), float(header["time"])
    return ParticleSet(records[:, 0:3], records[:, 3:6], records[:, 6]), float(header["time"])


def write_field(path, field: LatticeField) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = field.values if field.values.ndim == 4 else field.values[None]
    with open(path, "wb") as f:
        _write_header(f, FIELD_HEADER, WireFormat.FIELD_MAGIC, field.M, field.time)
        for component in values:
            # [ix, iy, iz] -> x fastest
            f.write(np.ascontiguousarray(component.transpose(2, 1, 0), dtype="<f8").tobytes())
    return path


def read_field(path, half_width: float = math.pi) -> LatticeField:
    buffer = Path(path).read_bytes()
    header = _read_header(buffer, FIELD_HEADER, WireFormat.FIELD_MAGIC, path)
    M = int(header["size"])
    data = np.frombuffer(buffer[FIELD_HEADER.itemsize:], dtype="<f8")
    if data.size not in (M ** 3, 3 * M ** 3):
        raise PayloadDecodeError(f"{path}: {data.size} values do not form a scalar or vector field of size {M}")
    values = data.reshape(-1, M, M, M).transpose(0, 3, 2, 1).copy()
    if values.shape[0] == 1:
        values = values[0]
    return LatticeField(values, half_width, float(header["time"]))
