"""Non-learned clutter filters: rank-cut SVD filtering and Butterworth wall filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from corona.tensor import as_movie, fold, svd, unfold


@dataclass(frozen=True)
class SvdFilterConfig:
    cut_rank: int = 2

    def __post_init__(self):
        if self.cut_rank < 0:
            raise ValueError("cut_rank must be >= 0")


@dataclass(frozen=True)
class WallFilterConfig:
    order: int = 6
    cutoff: float = 0.2  # fraction of pi rad/sample

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not 0.0 < self.cutoff < 1.0:
            raise ValueError(f"cutoff must lie in (0, 1), got {self.cutoff}")


def svd_filter(movie, cfg: SvdFilterConfig = SvdFilterConfig()) -> np.ndarray:
    """Zero the ``cut_rank`` largest singular components of the Casorati matrix."""
    movie = as_movie(movie)
    mat = unfold(movie)
    if cfg.cut_rank > min(mat.shape):
        raise ValueError(f"cut_rank {cfg.cut_rank} exceeds matrix rank bound {min(mat.shape)}")
    if cfg.cut_rank == 0:
        return movie.copy()
    U, s, V = svd(mat)
    s = s.copy()
    s[: cfg.cut_rank] = 0.0
    return fold((U * s) @ V.conj().T, movie.shape)


def design_butterworth_highpass(cfg: WallFilterConfig = WallFilterConfig()):
    """Digital Butterworth high-pass ``(b, a)`` via the prewarped bilinear transform."""
    if not 0.0 < cfg.cutoff < 1.0:
        raise ValueError(f"cutoff must lie in (0, 1), got {cfg.cutoff}")
    b, a = signal.butter(cfg.order, cfg.cutoff, btype="highpass")
    return b, a


def wall_filter(movie, cfg: WallFilterConfig = WallFilterConfig()) -> np.ndarray:
    """Zero-phase (forward-backward) temporal high-pass of every pixel.

    Each pixel trace is mirror-extended by ``T - 1`` samples at both ends
    before filtering, so start-up transients settle outside the movie. At
    least ``3*order + 1`` frames are required.
    """
    movie = as_movie(movie)
    padlen = 3 * cfg.order
    if movie.shape[0] <= padlen:
        raise ValueError(f"movie has {movie.shape[0]} frames; need more than {padlen} for order {cfg.order}")
    b, a = design_butterworth_highpass(cfg)
    return signal.filtfilt(b, a, movie, axis=0, padtype="even", padlen=movie.shape[0] - 1)
