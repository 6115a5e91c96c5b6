import numpy as np
import pytest

from corona.network import CoronaNetwork, forward, init_from_ista, weights_to_bytes
from corona.prox import RegWeights
from corona.sim import SimConfig, simulate
from corona.solver import SolverConfig
from corona.training import (
    AdamState,
    TrainConfig,
    TrainPair,
    TrainingDivergedError,
    adam_step,
    extract_patches,
    label_with_solver,
    loss_and_gradient,
    mse_loss,
    patch_origins,
    read_checkpoint,
    recombine_patches,
    train,
)

from oracles import crandn


# -- loss ------------------------------------------------------------------------


def test_mse_examples():
    rng = np.random.default_rng(0)
    S, L = crandn(rng, 3, 4, 4), crandn(rng, 3, 4, 4)
    assert mse_loss(S, L, S, L) == 0
    S1, L1 = S / np.linalg.norm(S), L / np.linalg.norm(L)
    Z = np.zeros_like(S)
    # (1/2)||S||^2 + (1/2)||L||^2 with unit-norm targets and N = 1
    assert mse_loss(Z, Z, S1, L1) == pytest.approx(1.0)
    P, Q = crandn(rng, 3, 4, 4), crandn(rng, 3, 4, 4)
    assert mse_loss(P, Q, S, L) == pytest.approx(mse_loss(S, L, P, Q))


def test_mse_averages_over_batch():
    rng = np.random.default_rng(1)
    S, L = crandn(rng, 2, 3, 4, 4), crandn(rng, 2, 3, 4, 4)
    Z = np.zeros_like(S)
    per = [mse_loss(Z[i], Z[i], S[i], L[i]) for i in range(2)]
    assert mse_loss(Z, Z, S, L) == pytest.approx(np.mean(per))


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 3, 3)), np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), np.zeros((2, 3, 3)))


def test_zero_loss_gradient_gives_zero_grads():
    rng = np.random.default_rng(2)
    D = crandn(rng, 4, 6, 6)
    net = init_from_ista(2, jitter=0.01, seed=0)
    L, S = forward(D, net)
    loss, g = loss_and_gradient(net, D, S, L)
    assert loss == 0
    assert not np.any(g.to_vector())


def test_lambda_s_gradient_sign():
    # S target zero, S prediction non-zero: raising lambda_S shrinks more and helps
    rng = np.random.default_rng(3)
    D = crandn(rng, 4, 6, 6)
    net = init_from_ista(1, jitter=0.01, seed=1)
    L, S = forward(D, net)
    assert np.any(S)
    _, g = loss_and_gradient(net, D, np.zeros_like(S), L, exact_statistics=True)
    assert g.layers[0].lambda_S < 0


# -- ADAM --------------------------------------------------------------------------


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    new, st = adam_step(p, np.zeros(2), AdamState.zeros(2), 0.002)
    np.testing.assert_array_equal(new, p)
    assert st.step == 1


def test_adam_scalar_quadratic_descends():
    x, st = np.array([1.0]), AdamState.zeros(1)
    prev = abs(x[0])
    for _ in range(100):
        x, st = adam_step(x, 2 * x, st, 0.002)
        assert abs(x[0]) < prev
        prev = abs(x[0])


def test_adam_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal(7)
    A = rng.standard_normal((7, 7))
    H = A @ A.T + np.eye(7)

    xt = torch.tensor(x0.copy(), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([xt], lr=0.002, betas=(0.9, 0.999), eps=1e-8)
    x, st = x0.copy(), AdamState.zeros(7)
    for _ in range(50):
        g = H @ x
        x, st = adam_step(x, g, st, 0.002)
        opt.zero_grad()
        xt.grad = torch.tensor(H @ xt.detach().numpy(), dtype=torch.float64)
        opt.step()
        np.testing.assert_allclose(x, xt.detach().numpy(), rtol=1e-10, atol=1e-14)


def test_adam_state_save_load(tmp_path):
    st = AdamState(np.arange(3.0), np.ones(3), 5)
    st.save(tmp_path / "a.npz")
    back = AdamState.load(tmp_path / "a.npz")
    np.testing.assert_array_equal(back.m, st.m)
    assert back.step == 5 and back.beta2 == 0.999


# -- patches -----------------------------------------------------------------------


def test_reference_patch_count():
    assert len(patch_origins((300, 128, 128), (20, 32, 32), 0.5)) == 1421


def test_single_patch_and_bounds():
    m = crandn(np.random.default_rng(5), 8, 16, 16)
    pieces = extract_patches(m, (8, 16, 16))
    assert len(pieces) == 1 and pieces[0][1] == (0, 0, 0)
    np.testing.assert_array_equal(recombine_patches(pieces, m.shape), m)
    for t, y, x in patch_origins((37, 50, 41), (8, 16, 16)):
        assert t + 8 <= 37 and y + 16 <= 50 and x + 16 <= 41


def test_extract_recombine_identity():
    m = crandn(np.random.default_rng(6), 37, 50, 41)
    out = recombine_patches(extract_patches(m, (8, 16, 16), 0.5), m.shape)
    np.testing.assert_allclose(out, m, rtol=1e-12)


def test_overlap_average():
    a = (np.full((2, 2, 4), 2.0), (0, 0, 0))
    b = (np.full((2, 2, 4), 4.0), (0, 0, 2))
    out = recombine_patches([a, b], (2, 2, 6))
    np.testing.assert_allclose(out[..., 2:4], 3.0)
    np.testing.assert_allclose(out[..., :2], 2.0)


def test_patch_errors():
    with pytest.raises(ValueError):
        extract_patches(np.zeros((4, 8, 8)), (8, 16, 16))
    with pytest.raises(ValueError):
        recombine_patches([(np.zeros((2, 2, 2)), (0, 0, 0))], (2, 2, 4))


# -- labeling ----------------------------------------------------------------------


def test_label_zero_patch_and_determinism():
    cfg = SolverConfig(max_iters=50)
    [pair] = label_with_solver([np.zeros((4, 6, 6))], cfg)
    assert not np.any(pair.s_target) and not np.any(pair.l_target)
    assert pair.provenance == "solver-labeled"
    d = crandn(np.random.default_rng(7), 4, 6, 6)
    a, b = label_with_solver([d], cfg), label_with_solver([d], cfg)
    np.testing.assert_array_equal(a[0].s_target, b[0].s_target)


def test_label_simulated_patch_sanity():
    sample = simulate(SimConfig(height=32, width=32, frames=20, seed=5, vessel_rows=(12, 18), min_mb_fraction=0.5))
    cfg = SolverConfig(RegWeights(0.03, 0.003), max_iters=300, rel_tol=1e-7)
    [pair] = label_with_solver([sample.D], cfg)
    # the label explains the data up to the noise and the regularization bias
    resid = np.linalg.norm(sample.D - pair.s_target - pair.l_target) / np.linalg.norm(sample.D)
    assert resid < 0.1
    err = np.linalg.norm(pair.l_target - sample.L) / np.linalg.norm(sample.L)
    assert err < 0.1


# -- training loop -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_pairs():
    pairs = []
    for seed in range(2):
        s = simulate(SimConfig(height=32, width=32, frames=16, seed=seed))
        for (d, _), (sp, _), (lp, _) in zip(*(extract_patches(x, (8, 16, 16)) for x in (s.D, s.S, s.L))):
            pairs.append(TrainPair(d, sp, lp))
    return pairs


def test_zero_epochs_leave_net_unchanged(small_pairs):
    net = init_from_ista(1, jitter=0.01, seed=0)
    res = train(net, small_pairs, None, TrainConfig(epochs_stage1=0, epochs_stage2=0))
    assert weights_to_bytes(res.net) == weights_to_bytes(net)
    assert res.history == []


def test_training_reproducible_and_logged(small_pairs, tmp_path):
    cfg = TrainConfig(epochs_stage1=2, epochs_stage2=1, batch_size=4, seed=3)
    net = init_from_ista(1, jitter=0.01, seed=0)
    r1 = train(net, small_pairs, small_pairs[:10], cfg, checkpoint_dir=tmp_path)
    r2 = train(net, small_pairs, small_pairs[:10], cfg)
    strip = lambda h: [{k: v for k, v in rec.items() if k != "seconds"} for rec in h]
    assert strip(r1.history) == strip(r2.history)
    assert len(r1.history) == 3
    assert [h["stage"] for h in r1.history] == [1, 1, 2]
    assert set(r1.history[0]) >= {"epoch", "stage", "train_loss", "val_loss", "lambda_L", "lambda_S", "seconds"}
    # resuming from the last stage-1 checkpoint reproduces the stage-2 epoch
    ck_net, ck_adam = read_checkpoint(tmp_path / "stage1_epoch002.weights")
    resumed = train(ck_net, None, small_pairs[:10], TrainConfig(epochs_stage1=0, epochs_stage2=1, batch_size=4, seed=3),
                    adam=ck_adam)
    assert resumed.adam.step == r1.adam.step


def test_missing_stage_data(small_pairs):
    with pytest.raises(ValueError):
        train(init_from_ista(1), None, None, TrainConfig(epochs_stage1=1, epochs_stage2=0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the overflow is the point
def test_divergence_aborts(small_pairs):
    net = init_from_ista(1, jitter=0.01, seed=0)
    big = 1e160  # squared errors overflow to inf
    bad = [TrainPair(p.d_patch * big, p.s_target * big, p.l_target * big) for p in small_pairs[:4]]
    with pytest.raises(TrainingDivergedError) as exc:
        train(net, bad, None, TrainConfig(epochs_stage1=1, epochs_stage2=0, batch_size=2))
    assert isinstance(exc.value.net, CoronaNetwork)


def test_one_layer_training_halves_loss():
    pairs = []
    seed = 0
    while len(pairs) < 200:
        s = simulate(SimConfig(height=64, width=64, frames=16, seed=seed))
        for (d, _), (sp, _), (lp, _) in zip(*(extract_patches(x, (8, 16, 16)) for x in (s.D, s.S, s.L))):
            pairs.append(TrainPair(d, sp, lp))
        seed += 1
    pairs = pairs[:200]
    res = train(init_from_ista(1, jitter=0.01, seed=0), pairs, None,
                TrainConfig(epochs_stage1=30, epochs_stage2=0, batch_size=8, seed=0))
    assert res.history[-1]["train_loss"] < 0.5 * res.initial_train_loss
