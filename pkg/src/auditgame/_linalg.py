"""Small symmetric-matrix helpers shared by the theory modules."""

from __future__ import annotations

import numpy as np

PINV_RTOL = 1e-10
RANK_RTOL = 1e-8


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {m.shape}")
    return m


def as_vector(v, name: str = "vector") -> np.ndarray:
    x = np.asarray(v, dtype=float).reshape(-1)
    return x


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def eigh_desc(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues in descending order."""
    vals, vecs = np.linalg.eigh(symmetrize(a))
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(symmetrize(a))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def inv_sqrtm_pd(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(symmetrize(a))
    if vals.min() <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (vecs / np.sqrt(vals)) @ vecs.T


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == cov for a (possibly singular) PSD matrix."""
    vals, vecs = np.linalg.eigh(symmetrize(cov))
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals)


def numerical_rank(a: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank of a symmetric PSD matrix, eigenvalues below rtol * largest count as zero."""
    vals = np.linalg.eigvalsh(symmetrize(a))
    top = np.abs(vals).max() if vals.size else 0.0
    if top == 0.0:
        return 0
    return int(np.sum(vals > rtol * top))


def row_rank(a: np.ndarray, rtol: float = PINV_RTOL) -> int:
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def is_psd(a: np.ndarray, rtol: float = 1e-8) -> bool:
    vals = np.linalg.eigvalsh(symmetrize(a))
    scale = max(np.abs(vals).max(), 0.0) if vals.size else 0.0
    return bool(vals.min() >= -rtol * scale) if vals.size else True
