"""Image products and contrast metrics: MIP, dB scaling, CNR/CR, profiles, MSE curves."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from corona.solver import SolverConfig, fista_solve
from corona.tensor import fold, unfold


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given ROIs (zero variance or zero background)."""


@dataclass(frozen=True)
class RoiBox:
    row: int
    col: int
    height: int
    width: int

    def check(self, shape) -> None:
        h, w = shape[-2:]
        if self.height < 1 or self.width < 1:
            raise ValueError(f"empty ROI {self}")
        if self.row < 0 or self.col < 0 or self.row + self.height > h or self.col + self.width > w:
            raise ValueError(f"ROI {self} outside image of shape {(h, w)}")
        if self.height * self.width < 2:
            raise ValueError(f"ROI {self} needs at least 2 pixels")

    def take(self, image: np.ndarray) -> np.ndarray:
        self.check(image.shape)
        return image[self.row:self.row + self.height, self.col:self.col + self.width]


@dataclass(frozen=True)
class MetricReport:
    method: str
    roi: str
    cnr_db: float
    cr_db: float


def mip(movie) -> np.ndarray:
    """Pixel-wise maximum magnitude over frames."""
    movie = np.asarray(movie)
    if movie.size == 0:
        raise ValueError("empty movie")
    return np.max(np.abs(movie), axis=0)


def to_db(image, floor_db: float = -60.0) -> np.ndarray:
    """``20 log10(image / max)`` clipped below at ``floor_db``."""
    if not floor_db < 0:
        raise ValueError("floor_db must be negative")
    image = np.abs(np.asarray(image, dtype=float))
    peak = image.max() if image.size else 0.0
    if peak == 0:
        return np.full(image.shape, float(floor_db))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(image / peak)
    return np.maximum(db, floor_db)


def _db(ratio: float) -> float:
    return 20.0 * math.log10(ratio) if ratio > 0 else -math.inf


def cnr(image, signal: RoiBox, background: RoiBox, *, as_db: bool = True) -> float:
    """``|mu_s - mu_b| / sqrt(var_s + var_b)`` on linear magnitudes (dB by default).

    A zero ratio maps to ``-inf`` dB.
    """
    image = np.abs(np.asarray(image, dtype=float))
    s, b = signal.take(image), background.take(image)
    denom = math.sqrt(s.var() + b.var())
    if denom == 0:
        raise UndefinedMetricError("CNR undefined: both ROIs have zero variance")
    ratio = abs(s.mean() - b.mean()) / denom
    return _db(ratio) if as_db else ratio


def cr(image, signal: RoiBox, background: RoiBox, *, as_db: bool = True) -> float:
    """``mu_s / mu_b`` on linear magnitudes (dB by default)."""
    image = np.abs(np.asarray(image, dtype=float))
    mu_s, mu_b = signal.take(image).mean(), background.take(image).mean()
    if mu_b <= 0:
        raise UndefinedMetricError("CR undefined: background mean is zero")
    ratio = mu_s / mu_b
    return _db(ratio) if as_db else ratio


def report(images: dict[str, np.ndarray], rois: dict[str, RoiBox], background: RoiBox) -> list[MetricReport]:
    """One record per method x signal ROI; undefined values become NaN."""
    rows = []
    for method, img in images.items():
        for name, roi in rois.items():
            vals = []
            for fn in (cnr, cr):
                try:
                    vals.append(fn(img, roi, background))
                except UndefinedMetricError:
                    vals.append(math.nan)
            rows.append(MetricReport(method, name, *vals))
    return rows


def intensity_profile(image_db, row: int, zero_mask=None) -> np.ndarray:
    """Row ``row`` of a dB image; pixels flagged in ``zero_mask`` become ``-inf``.

    ``zero_mask`` marks exact zeros of the linear image (see :func:`profile_from_linear`).
    """
    image_db = np.asarray(image_db, dtype=float)
    if not 0 <= row < image_db.shape[0]:
        raise IndexError(f"row {row} out of range")
    out = image_db[row].copy()
    if zero_mask is not None:
        out[np.asarray(zero_mask)[row]] = -np.inf
    return out


def profile_from_linear(image, row: int, floor_db: float = -60.0) -> np.ndarray:
    image = np.abs(np.asarray(image, dtype=float))
    return intensity_profile(to_db(image, floor_db), row, image == 0)


def _mse_pair(S_hat, L_hat, S_true, L_true):
    n = S_true.shape[0] if S_true.ndim > 3 else 1
    ms = float(np.vdot(S_hat - S_true, S_hat - S_true).real) / n
    ml = float(np.vdot(L_hat - L_true, L_hat - L_true).real) / n
    return ms, ml, 0.5 * (ms + ml)


def fista_mse_curve(D, S_true, L_true, ks: Sequence[int], cfg: SolverConfig = SolverConfig()):
    """``(k, mse_S, mse_L, mse_avg)`` for FISTA iterates at each requested ``k``.

    ``D``, ``S_true``, ``L_true`` are movies or stacks of movies; errors are
    squared Frobenius norms averaged over movies, ``mse_avg`` weights both
    parts by 1/2.
    """
    D = np.asarray(D)
    stack = D if D.ndim > 3 else D[None]
    S_true = np.asarray(S_true).reshape(stack.shape)
    L_true = np.asarray(L_true).reshape(stack.shape)
    ks = sorted(set(int(k) for k in ks))
    want = set(ks)
    sums = {k: np.zeros(2) for k in ks}
    run_cfg = SolverConfig(cfg.weights, max(ks), 0.0, cfg.lipschitz, "fista")
    for d, s_t, l_t in zip(stack, S_true, L_true):
        shape = d.shape

        def grab(k, L, S):
            if k in want:
                sums[k] += _mse_pair(fold(S, shape), fold(L, shape), s_t, l_t)[:2]

        L, S, st = fista_solve(unfold(d), cfg=run_cfg, callback=grab)
        for k in ks:
            if k > st.iter:  # stopped early: later iterates equal the last one
                sums[k] += _mse_pair(fold(S, shape), fold(L, shape), s_t, l_t)[:2]
    n = stack.shape[0]
    return [(k, sums[k][0] / n, sums[k][1] / n, 0.5 * (sums[k][0] + sums[k][1]) / n) for k in ks]


def corona_mse_curve(train_pairs, val_pairs, layer_counts: Iterable[int], train_cfg, *, lipschitz: float = 2.0,
                     jitter: float = 0.01):
    """Train a fresh ``k``-layer network per ``k`` and score it on ``val_pairs``."""
    from corona.network import forward, init_from_ista
    from corona.training import stack_pairs, train

    Dv, Sv, Lv = stack_pairs(val_pairs)
    curve = []
    for k in layer_counts:
        net = init_from_ista(k, lipschitz, jitter=jitter, seed=train_cfg.seed)
        res = train(net, train_pairs, None, train_cfg)
        L_hat, S_hat = forward(Dv, res.net)
        curve.append((k, *_mse_pair(S_hat, L_hat, Sv, Lv)))
    return curve
