"""Dense kernels, deterministic hashing and matrix inverse-pth roots.

Everything here works in float64. The optimizer calls
:func:`inverse_pth_root` on symmetric PSD statistics; the sampler calls
:func:`hash_uniform_array` to decide which examples to keep.

Hash definition (bit exact, all arithmetic modulo 2**64)::

    mix64(z):  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
               z = (z ^ (z >> 27)) * 0x94D049BB133111EB
               return z ^ (z >> 31)

    hash64(salt, key) = mix64(key ^ mix64(salt + 0x9E3779B97F4A7C15))
    uniform(salt, key) = (hash64(salt, key) >> 11) * 2**-53
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ValidationError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def matmul(a, b):
    """Matrix product with a shape check.

    Backed by numpy's BLAS call; for fixed shapes and thread count the
    result is reproducible bit for bit from run to run.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


# ---------------------------------------------------------------------------
# hashing
# ---------------------------------------------------------------------------


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def hash64(salt: int, key: int) -> int:
    return mix64((key & MASK64) ^ mix64(salt + GOLDEN_GAMMA))


def hash_uniform(salt: int, key: int) -> float:
    """Deterministic uniform value in [0, 1) for ``(salt, key)``."""
    return (hash64(salt, key) >> 11) * 2.0**-53


def _mix64_array(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MUL1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MUL2)
    return z ^ (z >> np.uint64(31))


def hash_uniform_array(salt: int, keys) -> np.ndarray:
    """Vectorized :func:`hash_uniform`; agrees with it bit for bit."""
    keys = np.asarray(keys)
    if keys.dtype != np.uint64:
        keys = keys.astype(np.int64).view(np.uint64)
    salt_mix = np.uint64(mix64(salt + GOLDEN_GAMMA))
    with np.errstate(over="ignore"):
        h = _mix64_array(np.atleast_1d(keys) ^ salt_mix)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class HashStream:
    """A salted family of deterministic uniforms."""

    salt: int

    def uniform(self, key: int) -> float:
        return hash_uniform(self.salt, key)

    def uniforms(self, keys) -> np.ndarray:
        return hash_uniform_array(self.salt, keys)


# ---------------------------------------------------------------------------
# inverse pth roots
# ---------------------------------------------------------------------------


class RootFallbackWarning(RuntimeWarning):
    """Coupled Newton did not converge; the eigendecomposition route was used."""


class RootResult(NamedTuple):
    root: np.ndarray
    iterations: int
    residual: float
    fell_back: bool


def _check_symmetric(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and float(np.max(np.abs(a - a.T))) > 1e-8 * scale:
        raise ValidationError("matrix is not symmetric")
    return 0.5 * (a + a.T)


def _power_iteration(a: np.ndarray, iters: int = 100, tol: float = 1e-6) -> float:
    """Largest eigenvalue estimate of a symmetric PSD matrix."""
    n = a.shape[0]
    v = np.ones(n) / np.sqrt(n)
    lam = 0.0
    for _ in range(iters):
        w = a @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / norm
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return max(lam, float(np.linalg.norm(a @ v)))


def eig_inverse_pth_root(a, p: int, eps: float) -> np.ndarray:
    """(a + eps*I)^(-1/p) through a symmetric eigendecomposition."""
    a = _check_symmetric(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    w, q = np.linalg.eigh(a + eps * np.eye(n))
    w = np.maximum(w, eps)
    root = (q * w ** (-1.0 / p)) @ q.T
    return 0.5 * (root + root.T)


def coupled_newton_root(a, p: int, eps: float = 1e-6, *, max_iter: int = 100,
                        tol: float = 1e-10) -> RootResult:
    """Coupled Newton iteration for ``(a + eps*I)^(-1/p)``.

    Iterates ``T = ((p+1) I - M) / p``, ``X <- X T``, ``M <- T^p M`` from
    ``M0 = z A``, ``X0 = z^(1/p) I`` with ``z = (1+p) / (2 ||A||_2)``; ``M``
    tracks ``X^p A`` and the loop stops once ``max|M - I| < tol``. Falls back
    to :func:`eig_inverse_pth_root` if the residual never reaches ``tol``.
    """
    if int(p) != p or p < 1:
        raise ValidationError(f"p must be a positive integer, got {p}")
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    p = int(p)
    a = _check_symmetric(np.asarray(a, dtype=np.float64))
    n = a.shape[0]
    eye = np.eye(n)
    mat = a + eps * eye
    lam_max = _power_iteration(mat)
    z = (1.0 + p) / (2.0 * lam_max)
    m = z * mat
    x = z ** (1.0 / p) * eye
    err = float(np.max(np.abs(m - eye)))
    it = 0
    while it < max_iter and err >= tol:
        t = ((p + 1.0) * eye - m) / p
        x_new = x @ t
        m_new = np.linalg.matrix_power(t, p) @ m
        new_err = float(np.max(np.abs(m_new - eye)))
        it += 1
        if not np.isfinite(new_err) or new_err > 1.2 * err and it > 1:
            break
        x, m, err = x_new, m_new, new_err
    if err < tol:
        return RootResult(0.5 * (x + x.T), it, err, False)
    root = eig_inverse_pth_root(a, p, eps)
    return RootResult(root, it, err, True)


def inverse_pth_root(a, p: int, eps: float = 1e-6, *, max_iter: int = 100,
                     tol: float = 1e-10) -> np.ndarray:
    """Return ``(a + eps*I)^(-1/p)`` for symmetric PSD ``a``.

    Emits :class:`RootFallbackWarning` when the Newton iteration fails to
    converge and the eigendecomposition result is returned instead.
    """
    result = coupled_newton_root(a, p, eps, max_iter=max_iter, tol=tol)
    if result.fell_back:
        warnings.warn(
            f"coupled Newton stalled at residual {result.residual:.3e} after "
            f"{result.iterations} iterations; used eigendecomposition",
            RootFallbackWarning, stacklevel=2)
    return result.root


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
