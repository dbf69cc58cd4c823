"""L1-penalised logistic regression (FISTA) and support-size-targeted selection."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from auditgame.datagen import Dataset


def _soft(x: np.ndarray, t: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def lasso_logistic(
    X: np.ndarray,
    y: np.ndarray,
    alpha: float,
    init: np.ndarray | None = None,
    max_iter: int = 2000,
    tol: float = 1e-8,
) -> np.ndarray:
    """Minimise mean logistic loss + alpha * ||w||_1 (intercept unpenalised).

    Returns ``(intercept, w...)``.
    """
    n, d = X.shape
    A = np.column_stack([np.ones(n), X])
    lip = np.linalg.norm(A, 2) ** 2 / (4.0 * n)
    step = 1.0 / lip
    theta = np.zeros(d + 1) if init is None else init.copy()
    momentum = theta.copy()
    t = 1.0
    for _ in range(max_iter):
        grad = A.T @ (expit(A @ momentum) - y) / n
        nxt = momentum - step * grad
        nxt[1:] = _soft(nxt[1:], step * alpha)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        momentum = nxt + ((t - 1.0) / t_next) * (nxt - theta)
        done = np.max(np.abs(nxt - theta)) <= tol * max(1.0, np.max(np.abs(nxt)))
        theta, t = nxt, t_next
        if done:
            break
    return theta


def select_support(X: np.ndarray, y: np.ndarray, k: int, max_bisect: int = 60) -> tuple[int, ...]:
    """Columns of an L1 logistic fit whose penalty is bisected to give k nonzeros."""
    n, d = X.shape
    if not 0 < k <= d:
        raise ValueError(f"k must lie in 1..{d}")
    y = np.asarray(y, dtype=float)
    if y.min() == y.max():
        raise ValueError("target is constant; cannot select variables")
    if k == d:
        return tuple(range(d))
    alpha_max = float(np.max(np.abs(X.T @ (y - y.mean()))) / n)
    lo, hi = np.log(alpha_max * 1e-6), np.log(alpha_max)
    best = None  # (count, alpha, theta) with the smallest count >= k
    theta = None
    for _ in range(max_bisect):
        mid = 0.5 * (lo + hi)
        theta = lasso_logistic(X, y, float(np.exp(mid)), init=theta)
        count = int(np.sum(theta[1:] != 0))
        if count >= k and (best is None or count < best[0]):
            best = (count, theta.copy())
        if count == k:
            break
        if count > k:
            lo = mid
        else:
            hi = mid
    if best is None:
        raise ValueError(f"could not reach {k} nonzero coefficients")
    coefs = best[1][1:]
    order = np.lexsort((np.arange(d), -np.abs(coefs)))
    return tuple(sorted(int(j) for j in order[:k]))


def select_explainer_vars(data: Dataset, target: str, k: int) -> tuple[int, ...]:
    """``target`` is ``"default"`` or a group label such as ``"minority"``."""
    if k >= data.X.shape[1] + 1:
        raise ValueError("k must be below the number of columns")
    y = data.y if target == "default" else data.group(target)
    return select_support(data.X, y, k)
