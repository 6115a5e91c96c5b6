"""Numerical substrate: movies, Casorati matrices, SVD, 2D complex convolution.

A *movie* is a complex array shaped ``(..., T, H, W)``; its Casorati matrix is
``(..., H*W, T)`` with one column per frame, pixels in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np


class SvdConvergenceError(RuntimeError):
    """The SVD backend did not converge."""


class PowerIterationError(RuntimeError):
    """Power iteration hit its iteration cap before converging."""


def as_movie(movie, *, batched: bool = False) -> np.ndarray:
    """Validate and return ``movie`` as a complex array.

    With ``batched=True`` any number of leading axes is allowed in front of
    ``(T, H, W)``.
    """
    arr = np.asarray(movie)
    if batched:
        if arr.ndim < 3:
            raise ValueError(f"movie must have at least 3 axes, got shape {arr.shape}")
    elif arr.ndim != 3:
        raise ValueError(f"movie must have shape (T, H, W), got {arr.shape}")
    if min(arr.shape[-3:]) < 1:
        raise ValueError(f"movie dimensions must be positive, got {arr.shape}")
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.complex128)
    if not np.all(np.isfinite(arr)):
        raise ValueError("movie contains non-finite values")
    return arr


def unfold(movie: np.ndarray) -> np.ndarray:
    """Casorati matrix of a movie: column ``t`` is frame ``t`` raveled row-major."""
    movie = np.asarray(movie)
    *lead, t, h, w = movie.shape
    return np.swapaxes(movie.reshape(*lead, t, h * w), -1, -2)


def fold(mat: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`; ``shape`` is ``(T, H, W)``."""
    mat = np.asarray(mat)
    t, h, w = shape
    if mat.shape[-2:] != (h * w, t):
        raise ValueError(f"Casorati shape {mat.shape[-2:]} does not match movie shape {tuple(shape)}")
    lead = mat.shape[:-2]
    return np.swapaxes(mat, -1, -2).reshape(*lead, t, h, w)


class SvdFactors(NamedTuple):
    """Thin SVD ``X = U @ diag(s) @ V.conj().T``."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.s[..., None, :]) @ np.swapaxes(self.V, -1, -2).conj()


def svd(mat: np.ndarray) -> SvdFactors:
    """Economy SVD with a deterministic phase convention.

    Each column of ``U`` is rotated so that its largest-magnitude entry is
    real and positive (``V`` rotated to match). Works on stacks of matrices.
    """
    mat = np.asarray(mat)
    if not np.all(np.isfinite(mat)):
        raise ValueError("svd input contains non-finite values")
    try:
        U, s, Vh = np.linalg.svd(mat, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(str(exc)) from exc
    V = np.swapaxes(Vh, -1, -2).conj()
    idx = np.argmax(np.abs(U), axis=-2)[..., None, :]
    pivot = np.take_along_axis(U, idx, axis=-2)
    mag = np.abs(pivot)
    phase = np.where(mag > 0, pivot / np.where(mag > 0, mag, 1), 1)
    U = U * phase.conj()
    V = V * phase.conj()
    return SvdFactors(U, s, V)


@dataclass
class ConvKernel2D:
    """Complex 2D kernel applied as zero-padded cross-correlation (no flip), stride 1.

    ``padding=None`` means "same" padding, ``((kh-1)//2, (kw-1)//2)``.
    """

    taps: np.ndarray
    bias: complex = 0j
    padding: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.complex128)
        if self.taps.ndim != 2:
            raise ValueError("kernel taps must be 2D")
        kh, kw = self.taps.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {self.taps.shape}")
        if self.padding is None:
            self.padding = ((kh - 1) // 2, (kw - 1) // 2)
        self.padding = (int(self.padding[0]), int(self.padding[1]))
        self.bias = complex(self.bias)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape

    @classmethod
    def impulse(cls, size: int = 3, value: complex = 1.0) -> "ConvKernel2D":
        taps = np.zeros((size, size), dtype=np.complex128)
        taps[size // 2, size // 2] = value
        return cls(taps)

    def copy(self) -> "ConvKernel2D":
        return ConvKernel2D(self.taps.copy(), self.bias, self.padding)


def correlate2d(x: np.ndarray, taps: np.ndarray, pad: tuple[tuple[int, int], tuple[int, int]]) -> np.ndarray:
    """Zero-padded 2D cross-correlation over the last two axes of ``x``."""
    kh, kw = taps.shape
    (pt, pb), (pl, pr) = pad
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pt, pb), (pl, pr)])
    ho = xp.shape[-2] - kh + 1
    wo = xp.shape[-1] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    dtype = np.result_type(x, taps)
    out = np.zeros(x.shape[:-2] + (ho, wo), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            t = taps[i, j]
            if t != 0:
                out += t * xp[..., i:i + ho, j:j + wo]
    return out


def conv2d(frame: np.ndarray, kernel: ConvKernel2D) -> np.ndarray:
    """Apply ``kernel`` to the last two axes of ``frame`` (bias added)."""
    ph, pw = kernel.padding
    out = correlate2d(np.asarray(frame), kernel.taps, ((ph, ph), (pw, pw)))
    if kernel.bias != 0:
        out = out + kernel.bias
    return out


def conv2d_movie(movie: np.ndarray, kernel: ConvKernel2D) -> np.ndarray:
    """Frame-wise :func:`conv2d` with one shared kernel (temporal extent 1)."""
    movie = np.asarray(movie)
    if movie.ndim < 3:
        raise ValueError("movie must have at least 3 axes")
    return conv2d(movie, kernel)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel2D, grad_out: np.ndarray):
    """Gradients of a real loss through :func:`conv2d`.

    Gradients follow the real/imaginary convention ``dl/dRe + 1j*dl/dIm``.
    Returns ``(grad_x, grad_taps, grad_bias)``; leading axes of ``x`` are
    summed out of the kernel gradients.
    """
    kh, kw = kernel.taps.shape
    ph, pw = kernel.padding
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])
    ho, wo = grad_out.shape[-2:]
    gxp = np.zeros(xp.shape, dtype=np.complex128)
    gtaps = np.empty((kh, kw), dtype=np.complex128)
    for i in range(kh):
        for j in range(kw):
            window = xp[..., i:i + ho, j:j + wo]
            gtaps[i, j] = np.vdot(window, grad_out)
            gxp[..., i:i + ho, j:j + wo] += np.conj(kernel.taps[i, j]) * grad_out
    gx = gxp[..., ph:ph + x.shape[-2], pw:pw + x.shape[-1]]
    return gx, gtaps, complex(grad_out.sum())


def spectral_norm(
    normal_op: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
    shapes: tuple[Sequence[int], Sequence[int]],
    *,
    tol: float = 1e-12,
    max_iters: int = 100_000,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a PSD operator acting on ``(L, S)`` pairs.

    ``normal_op`` maps a pair to ``A^H A`` applied to it. Power iteration from
    a seeded complex start; the estimate is the Rayleigh quotient.
    """
    rng = np.random.default_rng(seed)

    def rand(shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

    x = (rand(shapes[0]), rand(shapes[1]))
    nrm = np.sqrt(np.vdot(x[0], x[0]).real + np.vdot(x[1], x[1]).real)
    x = (x[0] / nrm, x[1] / nrm)
    prev = None
    for _ in range(max_iters):
        y = normal_op(*x)
        lam = np.vdot(x[0], y[0]).real + np.vdot(x[1], y[1]).real
        nrm = np.sqrt(np.vdot(y[0], y[0]).real + np.vdot(y[1], y[1]).real)
        if nrm == 0:
            return 0.0
        x = (y[0] / nrm, y[1] / nrm)
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            return float(lam)
        prev = lam
    raise PowerIterationError(f"power iteration did not converge in {max_iters} iterations")
