"""
tensor_core.py - Dense kernels every other module builds on.

Storage is float32 (the Matrix carrier); every reduction runs in float64 and is
rounded back at the public boundary. The `*64` variants keep float64 end to end
and are what the attention pipelines chain together internally.

matmul accumulates each output element left to right over the inner dimension.
Rows are spread over numba threads, which never changes that per-element order,
so results are bit-identical for any FNA_THREADS setting.
"""

import logging
import os
from contextlib import contextmanager

import numba
import numpy as np
from dotenv import load_dotenv
from numba import njit, prange
from scipy import linalg
from scipy.special import erf

import config

logger = logging.getLogger(__name__)

# Dense row-major float32 array, shape (rows, cols).
Matrix = np.ndarray
# Boolean array with the same shape as the matrix it applies to.
BoolMask = np.ndarray

MAX_PINV_SIZE = 1024


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class NonFiniteError(ValueError):
    """A matrix contains NaN or Inf."""


class DegenerateMaskError(ValueError):
    """A mask row has no surviving entry, so masked softmax is undefined."""


# =============================================================================
# CONSTRUCTION / VALIDATION
# =============================================================================

def as_matrix(data, name="matrix"):
    """
    Coerce data into the Matrix carrier.

    Args:
        data: anything numpy can turn into a 2-D numeric array
        name: label used in error messages

    Returns:
        C-contiguous float32 ndarray of shape (rows, cols)

    Raises:
        ShapeError: data is not 2-D
        NonFiniteError: any entry is NaN or Inf
    """
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{name} has non-finite entries")
    return m


def as_vector(data, length, name="vector"):
    """Coerce data into a float64 1-D array of the given length."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != length:
        raise ShapeError(f"{name} must have shape ({length},), got {v.shape}")
    return v


def as_mask(bits, shape):
    """Coerce bits into a BoolMask of exactly `shape`."""
    mask = np.asarray(bits, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


def _as_f64(m, name):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return np.ascontiguousarray(m, dtype=np.float64)


def _to_f32(m):
    return np.ascontiguousarray(m, dtype=np.float32)


# =============================================================================
# THREADS
# =============================================================================

def configure_threads():
    """
    Apply the FNA_THREADS cap from the environment (or .env) to numba.

    Returns:
        Number of worker threads in effect.
    """
    load_dotenv(config.ENV_FILE)
    limit = numba.config.NUMBA_NUM_THREADS
    raw = os.getenv(config.THREADS_ENV_VAR)
    if raw:
        try:
            requested = int(raw)
        except ValueError:
            logger.warning("Ignoring %s=%r (not an integer)", config.THREADS_ENV_VAR, raw)
        else:
            numba.set_num_threads(max(1, min(requested, limit)))
    threads = numba.get_num_threads()
    logger.debug("numba threads: %d (limit %d)", threads, limit)
    return threads


@contextmanager
def single_thread():
    """Run the enclosed block with one numba worker thread."""
    previous = numba.get_num_threads()
    numba.set_num_threads(1)
    try:
        yield
    finally:
        numba.set_num_threads(previous)


# =============================================================================
# MATMUL
# =============================================================================

@njit(parallel=True, cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


def matmul64(a, b):
    """float64 product with fixed left-to-right inner accumulation."""
    a = _as_f64(a, "a")
    b = _as_f64(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    if a.shape[1] and out.size:
        _matmul_kernel(a, b, out)
    return out


def matmul(a, b):
    """
    Matrix product of two float32 matrices.

    Products and sums run in float64, left to right over the inner
    dimension, then round once to float32.

    Raises:
        ShapeError: a.cols != b.rows
    """
    return _to_f32(matmul64(as_matrix(a, "a"), as_matrix(b, "b")))


# =============================================================================
# SOFTMAX FAMILY
# =============================================================================

def softmax64(m, inplace=False):
    """Row softmax in float64. With inplace=True, m must already be float64."""
    out = m if inplace else _as_f64(m, "logits").copy()
    out -= out.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def masked_softmax64(m, mask):
    """Renormalized softmax over the entries where mask is True (float64)."""
    m = _as_f64(m, "logits")
    mask = as_mask(mask, m.shape)
    empty = ~mask.any(axis=1)
    if empty.any():
        raise DegenerateMaskError(
            f"mask rows {np.flatnonzero(empty).tolist()} have no true entry")
    out = np.where(mask, m, -np.inf)
    out -= out.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def sunk_softmax64(m, mask):
    """Plain softmax with the entries where mask is False zeroed (float64)."""
    m = _as_f64(m, "logits")
    mask = as_mask(mask, m.shape)
    out = softmax64(m)
    out[~mask] = 0.0
    return out


def softmax_rows(m):
    """Max-subtracted softmax of each row; rows sum to 1."""
    return _to_f32(softmax64(as_matrix(m, "logits")))


def masked_softmax_rows(m, mask):
    """
    Masked softmax: entries with mask False are exactly 0 and the rest
    renormalize over the unmasked exponential sum.

    Raises:
        DegenerateMaskError: some row of mask is all False
    """
    return _to_f32(masked_softmax64(as_matrix(m, "logits"), mask))


def sunk_softmax_rows(m, mask):
    """Sinking: mask * softmax(m). Rows sum to at most 1; all-False rows give 0."""
    return _to_f32(sunk_softmax64(as_matrix(m, "logits"), mask))


# =============================================================================
# PSEUDO-INVERSE
# =============================================================================

def pinv64(m, rel_tol=config.PINV_REL_TOL):
    """Moore-Penrose pseudo-inverse of a square matrix via full SVD (float64)."""
    m = _as_f64(m, "pinv input")
    rows, cols = m.shape
    if rows != cols:
        raise ShapeError(f"pinv expects a square matrix, got {m.shape}")
    if rows > MAX_PINV_SIZE:
        raise ShapeError(f"pinv input {rows}x{rows} exceeds {MAX_PINV_SIZE}x{MAX_PINV_SIZE}")
    if rows == 0:
        return np.zeros((0, 0))
    u, sigma, vt = linalg.svd(m, full_matrices=True, lapack_driver="gesvd")
    sigma_max = sigma[0]
    if sigma_max == 0.0:
        return np.zeros_like(m)
    keep = sigma > rel_tol * sigma_max
    inv_sigma = np.zeros_like(sigma)
    inv_sigma[keep] = 1.0 / sigma[keep]
    return matmul64(vt.T * inv_sigma, u.T)


def pinv(m, rel_tol=config.PINV_REL_TOL):
    """
    Pseudo-inverse of an s x s matrix (s <= 1024).

    Singular values below rel_tol * sigma_max count as zero.

    Raises:
        ShapeError: input is not square or too large
    """
    return _to_f32(pinv64(as_matrix(m, "pinv input"), rel_tol))


# =============================================================================
# LAYER NORM / GELU
# =============================================================================

def layer_norm64(m, gamma, beta, eps=config.LAYER_NORM_EPS):
    """Per-row normalization with biased variance, then affine scale/shift."""
    m = _as_f64(m, "layer_norm input")
    cols = m.shape[1]
    gamma = as_vector(gamma, cols, "gamma")
    beta = as_vector(beta, cols, "beta")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    centered = m - m.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def layer_norm(m, gamma, beta, eps=config.LAYER_NORM_EPS):
    """LayerNorm of each row of a float32 matrix."""
    return _to_f32(layer_norm64(as_matrix(m, "layer_norm input"), gamma, beta, eps))


def gelu64(m):
    """Exact erf GELU in float64; scipy's erf stays within config.ERF_MAX_ERROR (1e-7) of erf."""
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * m * (1.0 + erf(m / np.sqrt(2.0)))


def gelu(m):
    """0.5 * x * (1 + erf(x / sqrt(2))), elementwise."""
    return _to_f32(gelu64(as_matrix(m, "gelu input")))


def row_norms(m):
    """Euclidean norm of each row, in float64."""
    m = np.asarray(m, dtype=np.float64)
    return np.sqrt((m * m).sum(axis=1))
