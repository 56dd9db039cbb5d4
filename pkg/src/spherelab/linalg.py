"""Dense-matrix primitives shared by the optimizers, the model and the checks.

Every function takes and returns ``float64`` numpy arrays. Matrices follow the
``(d_out, d_in)`` convention used throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_EPS = 1e-7


def as_mat(m) -> np.ndarray:
    """Validate and convert ``m`` to a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    return a


def frobenius_norm(m) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(m, dtype=np.float64)))))


def matrix_rms(m) -> float:
    """``||m||_F / sqrt(rows * cols)``."""
    a = np.asarray(m, dtype=np.float64)
    return frobenius_norm(a) / np.sqrt(a.size)


def vector_rms(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("vector_rms of an empty vector")
    return float(np.linalg.norm(x) / np.sqrt(x.size))


def frobenius_inner(a, b) -> float:
    return float(np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)))


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self) -> float:
        return self.value


def spectral_norm(m, iters: int = 100, tol: float = 1e-12, seed: int = 0) -> SpectralEstimate:
    """Largest singular value by power iteration on ``m^T m``.

    Never raises on slow convergence; the returned estimate carries a
    ``converged`` flag instead.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = as_mat(m)
    if not np.any(a):
        return SpectralEstimate(0.0, True, 0)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for i in range(1, iters + 1):
        u = a @ v
        w = a.T @ u
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return SpectralEstimate(0.0, True, i)
        v = w / nw
        new_sigma = float(np.linalg.norm(a @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            return SpectralEstimate(new_sigma, True, i)
        sigma = new_sigma
    return SpectralEstimate(sigma, False, iters)


def newton_schulz_orthogonalize(g, steps: int = 5, coeffs=NS_COEFFS, eps: float = NS_EPS) -> np.ndarray:
    """Approximate the semi-orthogonal polar factor ``U V^T`` of ``g``.

    Quintic Newton-Schulz iteration on the Frobenius-normalized input. The
    iteration works on the wide orientation so the Gram matrix is the
    smaller of the two. A zero input maps to zeros.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(g, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    a, b, c = coeffs
    tall = x.shape[0] > x.shape[1]
    if tall:
        x = x.T
    x = x / (frobenius_norm(x) + eps)
    for _ in range(steps):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
    return x.T if tall else x


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))
