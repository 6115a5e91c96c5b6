import math

import numpy as np
import pytest

from corona.metrics import (
    RoiBox,
    UndefinedMetricError,
    cnr,
    cr,
    fista_mse_curve,
    intensity_profile,
    mip,
    profile_from_linear,
    report,
    to_db,
)
from corona.solver import SolverConfig, fista_solve
from corona.prox import RegWeights
from corona.tensor import fold, unfold

from oracles import crandn


def test_mip_cases():
    rng = np.random.default_rng(0)
    frame = crandn(rng, 1, 4, 5)
    np.testing.assert_array_equal(mip(frame), np.abs(frame[0]))
    const = np.repeat(frame, 6, axis=0)
    np.testing.assert_array_equal(mip(const), np.abs(frame[0]))
    two = np.zeros((2, 3, 3), complex)
    two[0, 0, 0] = 3j
    two[1, 2, 1] = -2
    expect = np.zeros((3, 3))
    expect[0, 0], expect[2, 1] = 3, 2
    np.testing.assert_array_equal(mip(two), expect)


def test_to_db_cases():
    img = np.array([[10.0, 1.0], [0.0, 5.0]])
    db = to_db(img, -60.0)
    assert db[0, 0] == 0.0
    assert db[0, 1] == pytest.approx(-20.0)
    assert db[1, 0] == -60.0
    assert np.all(to_db(np.zeros((3, 3)), -40.0) == -40.0)
    with pytest.raises(ValueError):
        to_db(img, 0.0)


def test_cnr_hand_value():
    img = np.zeros((2, 4))
    img[0] = 2.0               # signal: constant 2
    img[1] = [0.0, 2.0, 0.0, 2.0]  # background: mean 1, std 1
    sig, bg = RoiBox(0, 0, 1, 4), RoiBox(1, 0, 1, 4)
    assert cnr(img, sig, bg, as_db=False) == pytest.approx(1.0)
    assert cnr(img, sig, bg) == pytest.approx(0.0)


def test_cnr_identical_rois_and_scaling():
    img = np.abs(np.random.default_rng(1).standard_normal((8, 8)))
    roi = RoiBox(1, 1, 4, 4)
    assert cnr(img, roi, roi) == -math.inf
    sig, bg = RoiBox(0, 0, 3, 3), RoiBox(4, 4, 4, 4)
    assert cnr(7.5 * img, sig, bg) == pytest.approx(cnr(img, sig, bg), rel=1e-12)
    with pytest.raises(UndefinedMetricError):
        cnr(np.ones((4, 4)), RoiBox(0, 0, 2, 2), RoiBox(2, 2, 2, 2))


def test_cr_cases():
    rng = np.random.default_rng(2)
    img = np.abs(rng.standard_normal((10, 12)))
    roi = RoiBox(2, 3, 4, 5)
    assert cr(img, roi, roi) == 0.0
    dec = np.ones((4, 4))
    dec[:2] = 10.0
    assert cr(dec, RoiBox(0, 0, 2, 4), RoiBox(2, 0, 2, 4)) == pytest.approx(20.0)
    sig, bg = RoiBox(0, 0, 3, 4), RoiBox(5, 6, 4, 6)
    direct = img[0:3, 0:4].mean() / img[5:9, 6:12].mean()
    assert cr(img, sig, bg, as_db=False) == pytest.approx(direct, rel=1e-12)
    with pytest.raises(UndefinedMetricError):
        cr(dec * 0, RoiBox(0, 0, 2, 4), RoiBox(2, 0, 2, 4))


def test_roi_bounds():
    with pytest.raises(ValueError):
        cr(np.ones((4, 4)), RoiBox(3, 3, 2, 2), RoiBox(0, 0, 2, 2))
    with pytest.raises(ValueError):
        RoiBox(0, 0, 1, 1).check((4, 4))


def test_report_rows():
    rng = np.random.default_rng(3)
    images = {m: np.abs(rng.standard_normal((8, 8))) for m in ("svd", "fista", "corona")}
    rois = {"a": RoiBox(0, 0, 2, 2), "b": RoiBox(2, 2, 3, 3)}
    rows = report(images, rois, RoiBox(5, 5, 3, 3))
    assert len(rows) == 3 * 2
    assert {(r.method, r.roi) for r in rows} == {(m, n) for m in images for n in rois}
    zero = report({"z": np.zeros((8, 8))}, rois, RoiBox(5, 5, 3, 3))
    assert all(math.isnan(r.cr_db) and math.isnan(r.cnr_db) for r in zero)


def test_profiles():
    prof = intensity_profile(to_db(np.full((4, 6), 3.0)), 2)
    assert len(prof) == 6 and np.all(prof == 0.0)
    img = np.ones((3, 5))
    img[1, 3] = 0.0
    p = profile_from_linear(img, 1)
    assert p[3] == -np.inf and np.all(p[[0, 1, 2, 4]] == 0.0)
    with pytest.raises(IndexError):
        intensity_profile(np.zeros((3, 5)), 3)


def test_fista_curve_replays_iterates():
    rng = np.random.default_rng(4)
    D, S, L = crandn(rng, 6, 5, 4), crandn(rng, 6, 5, 4), crandn(rng, 6, 5, 4)
    cfg = SolverConfig(RegWeights(0.5, 0.2))
    ks = [1, 3, 10]
    curve = fista_mse_curve(D, S, L, ks, cfg)
    assert [c[0] for c in curve] == ks
    for k, ms, ml, avg in curve:
        Lk, Sk, _ = fista_solve(unfold(D), cfg=SolverConfig(cfg.weights, k, 0.0, cfg.lipschitz, "fista"))
        assert ms == pytest.approx(np.linalg.norm(fold(Sk, D.shape) - S) ** 2, rel=1e-10)
        assert ml == pytest.approx(np.linalg.norm(fold(Lk, D.shape) - L) ** 2, rel=1e-10)
        assert avg == pytest.approx(0.5 * (ms + ml))


def test_fista_curve_fixed_point():
    # D = 0 is a fixed point of every iteration: zero error from k = 1 onward
    z = np.zeros((4, 3, 3), complex)
    curve = fista_mse_curve(z, z, z, range(1, 6))
    assert len(curve) == 5
    assert all(c[1] == c[2] == c[3] == 0 for c in curve)
