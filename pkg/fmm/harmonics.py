"""
Solid harmonics of the Laplace kernel and the index tables of the
translation operators.

Convention
----------
Regular harmonics are the Fourier coefficients in u of
(z + i (x cos u + y sin u))^n / n!:

    A_n^m(x) = i^m r^n P_n^m(cos theta) e^{-i m phi} / (n + m)!     (m >= 0)
    A_n^{-m} = (-1)^m conj(A_n^m)

with P_n^m the Ferrers functions without Condon-Shortley phase. Irregular
harmonics are

    S_n^m(x) = (n - |m|)! (n + |m|)! conj(A_n^m(x)) / r^(2n + 1)

so that 1/|x - y| = sum_{n, m} A_n^m(y) S_n^m(x) for |y| < |x|, and

    A_n^m(x + y) = sum_{k, l} A_k^l(x) A_{n-k}^{m-l}(y)

holds with no phase factors. Every operator in expansion.py follows from
these two identities.

Storage
-------
"tri" arrays hold 0 <= m <= n < p at flat index n (n + 1) / 2 + m.
"full" arrays hold -n <= m <= n in a (p, 2p - 1) block with m offset by
p - 1; entries with |m| > n are zero.
"""

from functools import lru_cache

import numpy as np


def tri_size(p):
    return p * (p + 1) // 2


def tri_index(n, m):
    return n * (n + 1) // 2 + m


@lru_cache(maxsize=None)
def _tri_nm(p):
    n = np.concatenate([np.full(k + 1, k) for k in range(p)]) if p else np.zeros(0, dtype=int)
    m = np.concatenate([np.arange(k + 1) for k in range(p)]) if p else np.zeros(0, dtype=int)
    return n.astype(np.int64), m.astype(np.int64)


def tri_degrees(p):
    """Degree n of every tri slot."""
    return _tri_nm(p)[0]


def tri_orders(p):
    """Order m of every tri slot."""
    return _tri_nm(p)[1]


# ============================================================================
# HARMONIC EVALUATION
# ============================================================================

def regular_tri(d, p):
    """
    Regular harmonics A_n^m, 0 <= m <= n < p.

    Args:
        d: (N, 3) offsets
        p: expansion order

    Returns:
        np.ndarray: (N, p(p+1)/2) complex128
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    r2 = x * x + y * y + z * z
    eta = x - 1j * y
    out = np.zeros((d.shape[0], tri_size(p)), dtype=np.complex128)

    sectoral = np.ones(d.shape[0], dtype=np.complex128)
    for m in range(p):
        if m > 0:
            sectoral = sectoral * (0.5j * eta / m)
        out[:, tri_index(m, m)] = sectoral
        if m + 1 < p:
            out[:, tri_index(m + 1, m)] = z * sectoral
        for n in range(m + 1, p - 1):
            out[:, tri_index(n + 1, m)] = (
                (2 * n + 1) * z * out[:, tri_index(n, m)] - r2 * out[:, tri_index(n - 1, m)]
            ) / ((n + 1) ** 2 - m * m)
    return out


def irregular_tri(d, p):
    """
    Irregular harmonics S_n^m, 0 <= m <= n < p.

    Args:
        d: (N, 3) offsets, nonzero
        p: number of degrees

    Returns:
        np.ndarray: (N, p(p+1)/2) complex128
    """
    d = np.asarray(d, dtype=np.float64).reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    r2 = x * x + y * y + z * z
    inv_r2 = 1.0 / r2
    xi = x + 1j * y
    out = np.zeros((d.shape[0], tri_size(p)), dtype=np.complex128)

    sectoral = np.sqrt(inv_r2).astype(np.complex128)
    for m in range(p):
        if m > 0:
            sectoral = sectoral * ((2 * m - 1) * (-1j) * xi * inv_r2)
        out[:, tri_index(m, m)] = sectoral
        if m + 1 < p:
            out[:, tri_index(m + 1, m)] = (2 * m + 1) * z * sectoral * inv_r2
        for n in range(m + 1, p - 1):
            out[:, tri_index(n + 1, m)] = (
                (2 * n + 1) * z * out[:, tri_index(n, m)] - (n * n - m * m) * out[:, tri_index(n - 1, m)]
            ) * inv_r2
    return out


# ============================================================================
# TRI <-> FULL LAYOUT
# ============================================================================

@lru_cache(maxsize=None)
def _full_maps(p):
    n, m = _tri_nm(p)
    width = 2 * p - 1
    pos = n * width + (p - 1) + m
    neg = n * width + (p - 1) - m
    sign = np.where(m % 2 == 0, 1.0, -1.0)
    return pos, neg, sign


def to_full(tri, p):
    """
    Expand (..., p(p+1)/2) tri coefficients of a real field to (..., p, 2p-1).
    """
    tri = np.asarray(tri)
    pos, neg, sign = _full_maps(p)
    lead = tri.shape[:-1]
    full = np.zeros(lead + (p * (2 * p - 1),), dtype=tri.dtype)
    full[..., neg] = (sign * np.conj(tri)).astype(tri.dtype)
    full[..., pos] = tri
    return full.reshape(lead + (p, 2 * p - 1))


def to_tri(full, p):
    """Collapse (..., p, 2p-1) full coefficients to their m >= 0 part."""
    full = np.asarray(full)
    pos, _, _ = _full_maps(p)
    lead = full.shape[:-2]
    return full.reshape(lead + (p * (2 * p - 1),))[..., pos]


# ============================================================================
# OPERATOR INDEX TABLES
# ============================================================================

@lru_cache(maxsize=None)
def shift_table(p):
    """
    Index table of the binomial translation
        out_n^m = sum_{k, l} in_k^l A_{n-k}^{m-l}(d),   0 <= m <= n < p.

    Returns:
        tuple: (out_tri, in_full_flat, a_full_flat) index arrays
    """
    width = 2 * p - 1
    out_idx, in_idx, a_idx = [], [], []
    for n in range(p):
        for m in range(n + 1):
            for k in range(n + 1):
                for l in range(-k, k + 1):
                    j, q = n - k, m - l
                    if abs(q) > j:
                        continue
                    out_idx.append(tri_index(n, m))
                    in_idx.append(k * width + l + p - 1)
                    a_idx.append(j * width + q + p - 1)
    return np.array(out_idx), np.array(in_idx), np.array(a_idx)


@lru_cache(maxsize=None)
def local_shift_table(p):
    """
    Index table of the local shift
        out_k^l = sum_{a >= k, b} in_a^b A_{a-k}^{b-l}(e),   0 <= l <= k < p.
    """
    width = 2 * p - 1
    out_idx, in_idx, a_idx = [], [], []
    for k in range(p):
        for l in range(k + 1):
            for a in range(k, p):
                for b in range(-a, a + 1):
                    j, q = a - k, b - l
                    if abs(q) > j:
                        continue
                    out_idx.append(tri_index(k, l))
                    in_idx.append(a * width + b + p - 1)
                    a_idx.append(j * width + q + p - 1)
    return np.array(out_idx), np.array(in_idx), np.array(a_idx)


@lru_cache(maxsize=None)
def m2l_table(p):
    """
    Index table of the multipole-to-local conversion
        out_a^b = (-1)^a sum_{n, m} in_n^m S_{n+a}^{m+b}(D),   0 <= b <= a < p,
    with S held as a full array of 2p - 1 degrees.

    Returns:
        tuple: (out_tri, in_full_flat, s_full_flat, sign)
    """
    width = 2 * p - 1
    s_degrees = 2 * p - 1
    s_width = 2 * s_degrees - 1
    out_idx, in_idx, s_idx, sign = [], [], [], []
    for a in range(p):
        for b in range(a + 1):
            for n in range(p):
                for m in range(-n, n + 1):
                    out_idx.append(tri_index(a, b))
                    in_idx.append(n * width + m + p - 1)
                    s_idx.append((n + a) * s_width + (m + b) + s_degrees - 1)
                    sign.append(-1.0 if a % 2 else 1.0)
    return np.array(out_idx), np.array(in_idx), np.array(s_idx), np.array(sign)


def dense_operator(values_flat, table, n_out, n_in, sign=None):
    """
    Assemble a batch of dense (n_out, n_in) operator matrices.

    Args:
        values_flat: (B, K) harmonic values the table indexes into
        table: (out_idx, in_idx, val_idx) arrays
        n_out: rows per matrix
        n_in: columns per matrix
        sign: optional per-entry factor

    Returns:
        np.ndarray: (B, n_out, n_in) complex128
    """
    out_idx, in_idx, val_idx = table[:3]
    batch = values_flat.shape[0]
    op = np.zeros((batch, n_out, n_in), dtype=np.complex128)
    vals = values_flat[:, val_idx]
    if sign is not None:
        vals = vals * sign
    # (out, in) pairs are unique in every table
    op[:, out_idx, in_idx] = vals
    return op


# ============================================================================
# DERIVATIVES OF LOCAL SERIES
# ============================================================================

def derivative_coefficients(full):
    """
    Coefficients of d/dx, d/dy, d/dz of a local series sum C_n^m A_n^m(y).

    Uses dA_n^m/dz = A_{n-1}^m, dA_n^m/dx = (i/2)(A_{n-1}^{m-1} + A_{n-1}^{m+1}),
    dA_n^m/dy = (1/2)(A_{n-1}^{m-1} - A_{n-1}^{m+1}).

    Args:
        full: (..., p, 2p-1) coefficients

    Returns:
        np.ndarray: (..., 3, p, 2p-1) derivative coefficients (x, y, z)
    """
    full = np.asarray(full)
    nxt = np.zeros_like(full)
    nxt[..., :-1, :] = full[..., 1:, :]
    up = np.zeros_like(full)      # C_{n+1}^{m+1}
    up[..., :, :-1] = nxt[..., :, 1:]
    down = np.zeros_like(full)    # C_{n+1}^{m-1}
    down[..., :, 1:] = nxt[..., :, :-1]
    half = np.asarray(0.5, dtype=full.real.dtype)
    dx = (up + down) * (1j * half)
    dy = (up - down) * half
    return np.stack([dx.astype(full.dtype), dy.astype(full.dtype), nxt], axis=-3)
