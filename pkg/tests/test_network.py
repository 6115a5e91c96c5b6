import numpy as np
import pytest

from corona.network import (
    CoronaNetwork,
    CorruptWeightsError,
    LayerParams,
    WeightsVersionError,
    compute_thresholds,
    forward,
    forward_layer,
    init_from_ista,
    init_random,
    load_weights,
    save_weights,
    sigmoid,
    weights_from_bytes,
    weights_to_bytes,
)
from corona.prox import RegWeights
from corona.solver import SolverConfig, ista_solve
from corona.tensor import ConvKernel2D, unfold

from oracles import crandn, ista_reference


def zero_net(K=1):
    layers = [LayerParams(*[ConvKernel2D(np.zeros((3, 3), complex)) for _ in range(6)]) for _ in range(K)]
    return CoronaNetwork(layers)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-800.0) == 0.0 and sigmoid(800.0) == 1.0


def test_threshold_examples():
    rng = np.random.default_rng(0)
    L, S = crandn(rng, 4, 5, 5), crandn(rng, 4, 5, 5)
    p = init_from_ista(1).layers[0].copy()
    p.lambda_L, p.lambda_S = 0.0, 20.0
    tL, tS = compute_thresholds(L, S, p, 0.4, 1.8)
    assert tL == pytest.approx(0.5 * 0.4 * np.abs(L).max())
    assert tS == pytest.approx(1.8 * np.abs(S).mean(), rel=1e-8)
    tL0, _ = compute_thresholds(np.zeros_like(L), S, p, 0.4, 1.8)
    assert tL0 == 0


def test_thresholds_scale_with_data():
    rng = np.random.default_rng(1)
    L, S = crandn(rng, 4, 5, 5), crandn(rng, 4, 5, 5)
    p = init_from_ista(1).layers[0]
    a = compute_thresholds(L, S, p, 0.4, 1.8)
    b = compute_thresholds(3.5 * L, 3.5 * S, p, 0.4, 1.8)
    np.testing.assert_allclose(np.array(b), 3.5 * np.array(a), rtol=1e-13)


def test_zero_kernels_give_zero():
    D = crandn(np.random.default_rng(2), 4, 6, 6)
    L, S = forward_layer(D, D, D, zero_net().layers[0])
    assert not np.any(L) and not np.any(S)


def test_zero_input_gives_zero():
    L, S = forward(np.zeros((4, 6, 6), complex), init_from_ista(3, jitter=0.01, seed=0))
    assert not np.any(L) and not np.any(S)


def test_shapes_preserved_through_depth():
    D = crandn(np.random.default_rng(3), 5, 7, 9)
    L, S = forward(D, init_random(6, seed=1))
    assert L.shape == S.shape == D.shape
    Db = crandn(np.random.default_rng(4), 3, 5, 7, 9)
    Lb, Sb = forward(Db, init_random(2, seed=1))
    assert Lb.shape == Db.shape
    np.testing.assert_allclose(Lb[1], forward(Db[1], init_random(2, seed=1))[0], atol=1e-12)


def test_forward_deterministic():
    D = crandn(np.random.default_rng(5), 4, 6, 6)
    net = init_from_ista(2, jitter=0.01, seed=3)
    a, b = forward(D, net), forward(D.copy(), net.copy())
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_init_impulses():
    net = init_from_ista(4, 2.0)
    for k, layer in enumerate(net.layers):
        size = 5 if k < 3 else 3
        for kern in layer.kernels:
            assert kern.taps.shape == (size, size)
            assert np.count_nonzero(kern.taps) == 1
    assert net.layers[0].p1.taps[2, 2] == 0.5


def test_one_layer_equals_one_ista_step():
    rng = np.random.default_rng(6)
    D = crandn(rng, 8, 16, 16)
    lam = (0.5, 0.2)
    net = init_from_ista(1, 2.0)
    L, S = forward(D, net, thresholds=(lam[0] / 2, lam[1] / 2))
    cfg = SolverConfig(RegWeights(*lam), max_iters=1, rel_tol=0.0, lipschitz=2.0, variant="ista")
    Li, Si, _ = ista_solve(unfold(D), cfg=cfg)
    np.testing.assert_allclose(unfold(L), Li, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(unfold(S), Si, rtol=1e-6, atol=1e-12)


def test_three_layers_track_ista_trajectory():
    rng = np.random.default_rng(7)
    D = crandn(rng, 8, 16, 16)
    lam = (1.0, 0.4)
    ref = ista_reference(D, 3, 2.0, lam)
    net = init_from_ista(3, 2.0)
    _, _, trace = forward(D, net, thresholds=(lam[0] / 2, lam[1] / 2), return_trace=True)
    L, S = forward(D, net, thresholds=(lam[0] / 2, lam[1] / 2))
    np.testing.assert_allclose(unfold(L), ref[-1][0], rtol=1e-5, atol=1e-10)
    np.testing.assert_allclose(unfold(S), ref[-1][1], rtol=1e-5, atol=1e-10)
    # intermediate layers: the trace stores each layer's input iterates
    for k in range(1, 3):
        np.testing.assert_allclose(unfold(trace.layers[k].L), ref[k - 1][0], rtol=1e-5, atol=1e-10)


def test_vector_round_trip():
    net = init_random(4, seed=2)
    vec = net.to_vector()
    assert vec.dtype == np.float64
    np.testing.assert_array_equal(net.from_vector(vec).to_vector(), vec)
    with pytest.raises(ValueError):
        net.from_vector(vec[:-1])


def test_weights_round_trip(tmp_path):
    net = init_from_ista(4, 2.0, jitter=0.01, seed=9)
    p1, p2 = tmp_path / "a.weights", tmp_path / "b.weights"
    save_weights(net, p1)
    loaded = load_weights(p1)
    save_weights(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    D = crandn(np.random.default_rng(8), 4, 6, 6)
    np.testing.assert_array_equal(forward(D, net)[1], forward(D, loaded)[1])


def test_weights_corruption_detected():
    data = weights_to_bytes(init_from_ista(2, 2.0))
    with pytest.raises(CorruptWeightsError):
        weights_from_bytes(data[:-10])
    flipped = bytearray(data)
    flipped[40] ^= 0xFF
    with pytest.raises(CorruptWeightsError):
        weights_from_bytes(bytes(flipped))
    with pytest.raises(CorruptWeightsError):
        weights_from_bytes(b"garbage")


def test_weights_version_checked():
    data = bytearray(weights_to_bytes(init_from_ista(1, 2.0)))
    data[8] = 99
    with pytest.raises(WeightsVersionError):
        weights_from_bytes(bytes(data))
