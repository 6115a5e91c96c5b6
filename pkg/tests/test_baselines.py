import numpy as np
import pytest

from corona.baselines import (
    SvdFilterConfig,
    WallFilterConfig,
    design_butterworth_highpass,
    svd_filter,
    wall_filter,
)
from corona.tensor import fold


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def response(b, a, w):
    z = np.exp(1j * np.asarray(w))
    return np.polyval(b, z) / np.polyval(a, z)


def bilinear_oracle(order, cutoff, w):
    """High-pass response built by hand from the analog prototype poles."""
    fs2 = 4.0  # 2*fs with fs = 2 (frequencies normalized to Nyquist)
    wc = fs2 * np.tan(np.pi * cutoff / 2)
    k = np.arange(order)
    proto = np.exp(1j * np.pi * (2 * k + order + 1) / (2 * order))  # left half-plane unit circle
    poles_s = wc / proto
    poles_z = (fs2 + poles_s) / (fs2 - poles_s)
    gain = np.real(fs2**order / np.prod(fs2 - poles_s))
    z = np.exp(1j * np.asarray(w))
    return gain * np.prod([(z - 1.0) / (z - p) for p in poles_z], axis=0)


# -- SVD filter ----------------------------------------------------------------


def test_svd_cut_zero_is_identity():
    m = crandn(np.random.default_rng(0), 6, 4, 4)
    np.testing.assert_allclose(svd_filter(m, SvdFilterConfig(0)), m)


def test_svd_rank_one_removed():
    rng = np.random.default_rng(1)
    mat = crandn(rng, 16, 1) @ crandn(rng, 1, 6)
    m = fold(mat, (6, 4, 4))
    assert np.linalg.norm(svd_filter(m, SvdFilterConfig(1))) <= 1e-9 * np.linalg.norm(m)


def test_svd_rank_two_tissue_leaves_scatterer():
    # tissue supported on pixels 0..13, scatterer on pixel 15: orthogonal column spaces
    rng = np.random.default_rng(2)
    T, P = 8, 16
    tissue = np.zeros((P, T), complex)
    tissue[:14] = 10 * (crandn(rng, 14, 2) @ crandn(rng, 2, T))
    # the scatterer's time course must also avoid the tissue's temporal subspace
    _, _, Vh = np.linalg.svd(tissue)
    trace = crandn(rng, T)
    trace -= Vh[:2].T @ (Vh[:2].conj() @ trace)
    scat = np.zeros((P, T), complex)
    scat[15] = 0.5 * trace
    m = fold(tissue + scat, (T, 4, 4))
    out = svd_filter(m, SvdFilterConfig(2))
    ref = fold(scat, (T, 4, 4))
    assert np.linalg.norm(out - ref) <= 1e-6 * np.linalg.norm(ref)


def test_svd_cut_too_large():
    with pytest.raises(ValueError):
        svd_filter(np.zeros((3, 2, 2), complex), SvdFilterConfig(4))


# -- Butterworth design ------------------------------------------------------------


def test_design_dc_and_cutoff():
    b, a = design_butterworth_highpass(WallFilterConfig(6, 0.2))
    assert 20 * np.log10(abs(response(b, a, 0.0)) + 1e-300) <= -80
    at_cut = 20 * np.log10(abs(response(b, a, np.pi * 0.2)))
    assert at_cut == pytest.approx(-3.01, abs=0.1)


@pytest.mark.parametrize("order,cutoff", [(6, 0.2), (2, 0.05), (4, 0.6)])
def test_design_matches_pole_oracle(order, cutoff):
    b, a = design_butterworth_highpass(WallFilterConfig(order, cutoff))
    w = np.linspace(0.01, np.pi, 400)
    np.testing.assert_allclose(response(b, a, w), bilinear_oracle(order, cutoff, w), rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("cutoff", [0.0, 1.0, -0.1])
def test_invalid_cutoff(cutoff):
    with pytest.raises(ValueError):
        WallFilterConfig(6, cutoff)


# -- wall filter ---------------------------------------------------------------------


def test_constant_movie_suppressed():
    m = np.ones((40, 3, 3), complex) * (1 + 2j)
    out = wall_filter(m)
    assert 20 * np.log10(np.linalg.norm(out) / np.linalg.norm(m)) <= -60


def test_nyquist_tone_passes():
    t = np.arange(64)
    m = np.broadcast_to(((-1.0) ** t)[:, None, None], (64, 2, 2)).astype(complex)
    out = wall_filter(m)
    assert 20 * np.log10(np.linalg.norm(out) / np.linalg.norm(m)) >= -0.1


def test_dc_plus_nyquist_superposition():
    order = 6
    t = np.arange(80)
    tone = ((-1.0) ** t) * (0.3 - 0.4j)
    m = (2.0 + tone)[:, None, None] * np.ones((1, 2, 3))
    out = wall_filter(m, WallFilterConfig(order, 0.2))
    inner = slice(2 * order, -2 * order)
    ref = np.broadcast_to(tone[:, None, None], m.shape)
    err = np.linalg.norm(out[inner] - ref[inner]) / np.linalg.norm(ref[inner])
    assert err <= 1e-3


def test_too_few_frames():
    with pytest.raises(ValueError):
        wall_filter(np.zeros((10, 2, 2), complex))
