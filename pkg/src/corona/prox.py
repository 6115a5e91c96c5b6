"""Proximal operators, norms and the L+S objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from corona.operators import MeasurementOps
from corona.tensor import svd


@dataclass(frozen=True)
class RegWeights:
    """Nuclear-norm weight ``lambda1`` and mixed l1,2-norm weight ``lambda2``."""

    lambda1: float = 0.02
    lambda2: float = 0.001

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regularization weights must be nonnegative")


def _svt_parts(mat: np.ndarray, alpha):
    U, s, V = svd(mat)
    alpha = np.asarray(alpha, dtype=float)
    shrunk = np.maximum(s - alpha[..., None], 0.0)
    out = (U * shrunk[..., None, :]) @ np.swapaxes(V, -1, -2).conj()
    return out, shrunk


def svt(mat: np.ndarray, alpha) -> np.ndarray:
    """Singular value thresholding ``U diag(max(0, s - alpha)) V^H``.

    ``alpha`` may be a scalar or one value per matrix of a stack.
    """
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("threshold must be nonnegative")
    return _svt_parts(mat, alpha)[0]


def numerical_rank(s: np.ndarray, rel: float = 1e-12) -> int:
    """Count of singular values above ``rel * max(s)``."""
    s = np.asarray(s)
    if s.size == 0 or s.max() == 0:
        return 0
    return int(np.count_nonzero(s > rel * s.max()))


def row_soft_threshold(mat: np.ndarray, alpha) -> np.ndarray:
    """Shrink every row by ``max(0, 1 - alpha/||row||_2)``; zero rows stay zero."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0):
        raise ValueError("threshold must be nonnegative")
    mat = np.asarray(mat)
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    a = alpha[..., None, None] if alpha.ndim else alpha
    ratio = np.divide(a, norms, out=np.full(norms.shape, np.inf), where=norms > 0)
    return np.maximum(0.0, 1.0 - ratio) * mat


def nuclear_norm(mat: np.ndarray) -> float:
    return float(np.sum(svd(mat).s))


def l12_norm(mat: np.ndarray) -> float:
    """Sum of row l2 norms."""
    return float(np.sum(np.linalg.norm(np.asarray(mat), axis=-1)))


def objective(D, L, S, weights: RegWeights = RegWeights(), ops: MeasurementOps | None = None) -> float:
    """``0.5||D - (H1 L + H2 S)||_F^2 + lambda1 ||L||_* + lambda2 ||S||_{1,2}`` on Casorati matrices."""
    ops = ops or MeasurementOps.identity()
    D, L, S = (np.asarray(x) for x in (D, L, S))
    if L.shape != S.shape:
        raise ValueError(f"L and S shapes differ: {L.shape} vs {S.shape}")
    model = ops.forward(L, S)
    if model.shape != D.shape:
        raise ValueError(f"model shape {model.shape} does not match data shape {D.shape}")
    fit = 0.5 * np.linalg.norm(D - model) ** 2
    return float(fit + weights.lambda1 * nuclear_norm(L) + weights.lambda2 * l12_norm(S))
