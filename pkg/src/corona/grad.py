"""Backward rules for the non-linear pieces of the network.

All gradients of a real loss ``l`` with respect to a complex array ``z`` use
the convention ``dl/dRe(z) + 1j * dl/dIm(z)``; real and imaginary parts are
treated as independent real parameters.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

DEGENERACY_CLAMP = 1e-8
DEGENERACY_WARN = 1e-6


def _h(x):
    return np.swapaxes(x, -1, -2).conj()


def svt_backward(U, s, V, thr, grad_out, *, clamp: float = DEGENERACY_CLAMP):
    """Backpropagate through ``Y = U diag(max(s - thr, 0)) V^H``.

    ``U, s, V`` is the thin SVD of the input (stacks allowed), ``thr`` one
    threshold per matrix. Returns ``(grad_X, grad_thr)``.

    When both singular values of a pair exceed the threshold the pairwise
    factors reduce to ``1 - thr/(s_i + s_j)`` and ``thr/(s_i + s_j)``, which
    stay exact at repeated singular values. For other pairs the denominators
    ``s_i^2 - s_j^2`` are clamped to ``clamp * s_max^2`` in magnitude, with a
    warning when that touches a pair straddling the threshold.
    """
    if U.shape[-2] < V.shape[-2]:
        gX, gthr = svt_backward(V, s, U, thr, _h(grad_out), clamp=clamp)
        return _h(gX), gthr
    thr = np.asarray(thr, dtype=float)[..., None]
    f = np.maximum(s - thr, 0.0)
    active = s > thr
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s > 0, f / np.where(s > 0, s, 1.0), np.where(thr == 0, 1.0, 0.0))

    G_hat = _h(U) @ grad_out @ V
    si, sj = s[..., :, None], s[..., None, :]
    fi, fj = f[..., :, None], f[..., None, :]
    smax2 = (s[..., :1] ** 2)[..., None]
    den = si * si - sj * sj
    floor = clamp * smax2
    den_c = np.where(den >= 0, 1.0, -1.0) * np.maximum(np.abs(den), floor)
    num_a = si * fi - sj * fj
    num_b = sj * fi - si * fj
    r = s.shape[-1]
    off = ~np.eye(r, dtype=bool)
    mixed = active[..., :, None] != active[..., None, :]
    near = (np.abs(si - sj) < DEGENERACY_WARN * np.sqrt(smax2)) & off & mixed
    if np.any(near & ((num_a != 0) | (num_b != 0))):
        log.warning("near-degenerate singular values in SVT backward; pairwise factors clamped")
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(off, num_a / den_c, 0.0)
        B = np.where(off, num_b / den_c, 0.0)
        # both shrunk by the same threshold: the gap cancels analytically
        both = active[..., :, None] & active[..., None, :] & off
        tsum = thr[..., None] / (si + sj)
        A = np.where(both, 1.0 - tsum, A)
        B = np.where(both, tsum, B)
    A = np.nan_to_num(A)
    B = np.nan_to_num(B)
    Q = A * G_hat + B * _h(G_hat)
    d = np.diagonal(G_hat, axis1=-2, axis2=-1)
    diag = active * d.real + 1j * ratio * d.imag
    idx = np.arange(r)
    Q[..., idx, idx] = diag

    grad_X = U @ Q @ _h(V) + ((grad_out @ V - U @ G_hat) * ratio[..., None, :]) @ _h(V)
    grad_thr = -np.sum(active * d.real, axis=-1)
    return grad_X, grad_thr


def row_threshold_backward(X, thr, grad_out):
    """Backpropagate through row-wise ``max(0, 1 - thr/||x||) x``.

    Rows inside the dead zone receive zero gradient. Returns
    ``(grad_X, grad_thr)`` with one threshold gradient per matrix.
    """
    thr = np.asarray(thr, dtype=float)
    t = thr[..., None, None]
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    active = norms > t
    safe = np.where(active, norms, 1.0)
    inner = np.sum((X.conj() * grad_out).real, axis=-1, keepdims=True)
    gX = grad_out - t * (grad_out / safe - X * inner / safe**3)
    gX = np.where(active, gX, 0.0)
    gX = np.where((t == 0) & (norms == 0), grad_out, gX)
    grad_thr = -np.sum(np.where(active, inner / safe, 0.0), axis=(-2, -1))
    return gX, grad_thr


def max_abs_backward(z, grad_stat):
    """Gradient of ``grad_stat * max|z|`` (per movie over the last three axes)."""
    lead = z.shape[:-3]
    flat = np.abs(z).reshape(*lead, -1)
    idx = np.argmax(flat, axis=-1)
    g = np.zeros(flat.shape, dtype=np.complex128)
    zf = z.reshape(*lead, -1)
    peak = np.take_along_axis(zf, idx[..., None], axis=-1)
    mag = np.abs(peak)
    unit = np.where(mag > 0, peak / np.where(mag > 0, mag, 1.0), 0.0)
    np.put_along_axis(g, idx[..., None], np.asarray(grad_stat)[..., None] * unit, axis=-1)
    return g.reshape(z.shape)


def mean_abs_backward(z, grad_stat):
    """Gradient of ``grad_stat * mean|z|`` (per movie over the last three axes)."""
    mag = np.abs(z)
    n = np.prod(z.shape[-3:])
    unit = np.where(mag > 0, z / np.where(mag > 0, mag, 1.0), 0.0)
    return np.asarray(grad_stat)[..., None, None, None] * unit / n
