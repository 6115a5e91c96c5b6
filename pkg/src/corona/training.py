"""Supervised training of the unfolded network.

Covers the weighted MSE loss, hand-written reverse-mode gradients through
the forward trace, ADAM, 3D patch extraction/recombination, solver labeling
and the two-stage (simulated, then solver-labeled) training loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from corona.grad import max_abs_backward, mean_abs_backward, row_threshold_backward, svt_backward
from corona.network import CoronaNetwork, ForwardTrace, forward, load_weights, save_weights, sigmoid
from corona.solver import SolverConfig, SolverDivergedError, fista_solve
from corona.tensor import ConvKernel2D, SvdConvergenceError, conv2d_backward, fold, unfold

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.002
    epochs_stage1: int = 50
    epochs_stage2: int = 20
    batch_size: int = 8
    patch_shape: tuple[int, int, int] = (20, 32, 32)  # (frames, height, width)
    overlap: float = 0.5
    seed: int = 0
    loss_weights: tuple[float, float] = (0.5, 0.5)  # (w_S, w_L)
    val_fraction: float = 0.1
    exact_statistics: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0 <= self.overlap < 1:
            raise ValueError("overlap must lie in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainPair:
    d_patch: np.ndarray
    s_target: np.ndarray
    l_target: np.ndarray
    provenance: str = "simulated"

    def __post_init__(self):
        if not (self.d_patch.shape == self.s_target.shape == self.l_target.shape):
            raise ValueError("patch and targets must share a shape")
        if not (np.all(np.isfinite(self.s_target)) and np.all(np.isfinite(self.l_target))):
            raise ValueError("targets must be finite")


def stack_pairs(pairs: Sequence[TrainPair]):
    """``(D, S, L)`` arrays of shape ``(N, T, H, W)``."""
    if not pairs:
        raise ValueError("no training pairs")
    D = np.stack([p.d_patch for p in pairs]).astype(np.complex128)
    S = np.stack([p.s_target for p in pairs]).astype(np.complex128)
    L = np.stack([p.l_target for p in pairs]).astype(np.complex128)
    return D, S, L


# -- loss --------------------------------------------------------------------


def _batch_count(x: np.ndarray) -> int:
    return int(np.prod(x.shape[:-3])) if x.ndim > 3 else 1


def mse_loss(S_pred, L_pred, S_tgt, L_tgt, weights=(0.5, 0.5)) -> float:
    """``(w_S sum||S_pred - S_tgt||^2 + w_L sum||L_pred - L_tgt||^2) / N``.

    ``N`` counts the movies along any leading batch axes (1 for a single movie).
    """
    return mse_loss_and_grad(S_pred, L_pred, S_tgt, L_tgt, weights)[0]


def mse_loss_and_grad(S_pred, L_pred, S_tgt, L_tgt, weights=(0.5, 0.5)):
    S_pred, L_pred, S_tgt, L_tgt = (np.asarray(x) for x in (S_pred, L_pred, S_tgt, L_tgt))
    if not (S_pred.shape == S_tgt.shape == L_pred.shape == L_tgt.shape):
        raise ValueError("prediction and target shapes differ")
    w_s, w_l = weights
    n = _batch_count(S_pred)
    dS = S_pred - S_tgt
    dL = L_pred - L_tgt
    loss = (w_s * np.vdot(dS, dS).real + w_l * np.vdot(dL, dL).real) / n
    return float(loss), 2 * w_s * dS / n, 2 * w_l * dL / n


# -- backward ----------------------------------------------------------------


def zero_like(net: CoronaNetwork) -> CoronaNetwork:
    return net.from_vector(np.zeros_like(net.to_vector()))


def backward(
    trace: ForwardTrace,
    net: CoronaNetwork,
    grad_L,
    grad_S,
    *,
    exact_statistics: bool = False,
) -> CoronaNetwork:
    """Parameter gradients given the loss gradient w.r.t. the final ``(L, S)``.

    The result has the network's structure: taps and biases hold complex
    gradients ``dl/dRe + 1j dl/dIm``, ``lambda_L``/``lambda_S`` real ones, so
    ``result.to_vector()`` lines up with ``net.to_vector()``.

    With ``exact_statistics=False`` the ``max``/``mean`` statistics feeding the
    thresholds are treated as constants (only the sigmoid path is
    differentiated); ``True`` differentiates through them as well.
    """
    grads = zero_like(net)
    D = trace.D
    gL = np.asarray(grad_L, dtype=np.complex128)
    gS = np.asarray(grad_S, dtype=np.complex128)
    for k in range(net.depth - 1, -1, -1):
        p = net.layers[k]
        lt = trace.layers[k]
        g = grads.layers[k]
        shape = lt.zL.shape[-3:]

        gzL_c, g_thr_L = svt_backward(lt.U, lt.s, lt.V, lt.thr_L, unfold(gL))
        gzS_c, g_thr_S = row_threshold_backward(unfold(lt.zS), lt.thr_S, unfold(gS))
        gzL = fold(gzL_c, shape)
        gzS = fold(gzS_c, shape)

        if not lt.pinned:
            axes = (-3, -2, -1)
            sig_l = sigmoid(p.lambda_L)
            sig_s = sigmoid(p.lambda_S)
            stat_l = np.max(np.abs(lt.zL), axis=axes)
            stat_s = np.mean(np.abs(lt.zS), axis=axes)
            g.lambda_L = float(np.sum(g_thr_L * sig_l * (1 - sig_l) * net.a_L * stat_l))
            g.lambda_S = float(np.sum(g_thr_S * sig_s * (1 - sig_s) * net.a_S * stat_s))
            if exact_statistics:
                gzL = gzL + max_abs_backward(lt.zL, g_thr_L * sig_l * net.a_L)
                gzS = gzS + mean_abs_backward(lt.zS, g_thr_S * sig_s * net.a_S)

        first = k == 0
        gL_prev = np.zeros_like(gL)
        gS_prev = np.zeros_like(gS)
        for out_grad, (src_name, kern_name) in (
            (gzL, ("L", "p5")), (gzL, ("S", "p3")), (gzL, ("D", "p1")),
            (gzS, ("L", "p6")), (gzS, ("S", "p4")), (gzS, ("D", "p2")),
        ):
            kern: ConvKernel2D = getattr(p, kern_name)
            gk: ConvKernel2D = getattr(g, kern_name)
            if src_name != "D" and first:
                # inputs of the first layer are identically zero
                gk.bias += complex(out_grad.sum())
                continue
            src = {"L": lt.L, "S": lt.S, "D": D}[src_name]
            gx, gtaps, gbias = conv2d_backward(src, kern, out_grad)
            gk.taps += gtaps
            gk.bias += gbias
            if src_name == "L":
                gL_prev += gx
            elif src_name == "S":
                gS_prev += gx
        gL, gS = gL_prev, gS_prev
    return grads


def loss_and_gradient(net: CoronaNetwork, D, S_tgt, L_tgt, weights=(0.5, 0.5), *, exact_statistics=False):
    """Forward, loss and backward in one call. Returns ``(loss, grads)``."""
    L_hat, S_hat, trace = forward(D, net, return_trace=True)
    loss, gS, gL = mse_loss_and_grad(S_hat, L_hat, S_tgt, L_tgt, weights)
    return loss, backward(trace, net, gL, gS, exact_statistics=exact_statistics)


# -- ADAM --------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)

    def save(self, path) -> None:
        np.savez(path, m=self.m, v=self.v, step=self.step, betas=[self.beta1, self.beta2, self.eps])

    @classmethod
    def load(cls, path) -> "AdamState":
        with np.load(path) as z:
            b1, b2, eps = z["betas"]
            return cls(z["m"].copy(), z["v"].copy(), int(z["step"]), float(b1), float(b2), float(eps))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """Bias-corrected ADAM on real vectors. Returns ``(new_params, new_state)``."""
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, step, state.beta1, state.beta2, state.eps)


# -- patches -----------------------------------------------------------------


def _starts(n: int, p: int, overlap: float) -> list[int]:
    stride = max(1, int(round(p * (1 - overlap))))
    starts = list(range(0, n - p + 1, stride))
    if starts[-1] + p < n:
        starts.append(n - p)
    return starts


def patch_origins(movie_shape, patch_shape, overlap: float = 0.5) -> list[tuple[int, int, int]]:
    if any(n < p for n, p in zip(movie_shape, patch_shape)):
        raise ValueError(f"movie {tuple(movie_shape)} smaller than patch {tuple(patch_shape)}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    axes = [_starts(n, p, overlap) for n, p in zip(movie_shape, patch_shape)]
    return [(t, y, x) for t in axes[0] for y in axes[1] for x in axes[2]]


def extract_patches(movie, patch_shape=(20, 32, 32), overlap: float = 0.5):
    """Overlapping ``(T, H, W)`` patches with stride ``patch*(1-overlap)`` per axis.

    A final patch flush with the far boundary covers any remainder.
    Returns a list of ``(patch, origin)``.
    """
    movie = np.asarray(movie)
    pt, ph, pw = patch_shape
    return [
        (movie[t:t + pt, y:y + ph, x:x + pw].copy(), (t, y, x))
        for t, y, x in patch_origins(movie.shape, patch_shape, overlap)
    ]


def recombine_patches(patches: Iterable, shape) -> np.ndarray:
    """Average overlapping ``(patch, origin)`` pairs back into a movie."""
    acc = np.zeros(shape, dtype=np.complex128)
    count = np.zeros(shape, dtype=np.int64)
    for patch, (t, y, x) in patches:
        pt, ph, pw = patch.shape
        acc[t:t + pt, y:y + ph, x:x + pw] += patch
        count[t:t + pt, y:y + ph, x:x + pw] += 1
    if np.any(count == 0):
        raise ValueError(f"{int(np.sum(count == 0))} voxels not covered by any patch")
    return acc / count


# -- labeling ----------------------------------------------------------------


def label_with_solver(d_patches: Iterable[np.ndarray], cfg: SolverConfig = SolverConfig()) -> list[TrainPair]:
    """Decompose each patch with FISTA and use the result as its training target."""
    pairs = []
    for i, d in enumerate(d_patches):
        d = np.asarray(d, dtype=np.complex128)
        try:
            L, S, _ = fista_solve(unfold(d), cfg=cfg)
        except (SolverDivergedError, SvdConvergenceError) as exc:
            log.warning("skipping patch %d: %s", i, exc)
            continue
        pairs.append(TrainPair(d, fold(S, d.shape), fold(L, d.shape), "solver-labeled"))
    return pairs


# -- training loop -----------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, net: CoronaNetwork, history: list):
        super().__init__(msg)
        self.net = net
        self.history = history


@dataclass
class TrainResult:
    net: CoronaNetwork
    history: list[dict] = field(default_factory=list)
    adam: AdamState | None = None
    initial_train_loss: float | None = None


def evaluate_loss(net: CoronaNetwork, D, S, L, weights=(0.5, 0.5), chunk: int = 64) -> float:
    """Training loss over a whole dataset, evaluated in chunks."""
    n = D.shape[0]
    total = 0.0
    for i in range(0, n, chunk):
        L_hat, S_hat = forward(D[i:i + chunk], net)
        m = min(chunk, n - i)
        total += mse_loss(S_hat, L_hat, S[i:i + chunk], L[i:i + chunk], weights) * m
    return total / n


def split_validation(n: int, fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n_val >= n:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(
    net: CoronaNetwork,
    stage1: Sequence[TrainPair] | None,
    stage2: Sequence[TrainPair] | None = None,
    cfg: TrainConfig = TrainConfig(),
    *,
    on_epoch: Callable[[dict], None] | None = None,
    checkpoint_dir=None,
    adam: AdamState | None = None,
) -> TrainResult:
    """Stage 1 on ``stage1`` pairs, then stage 2 on ``stage2`` pairs.

    One ADAM state spans both stages (pass ``adam`` to resume). Each epoch
    appends a history record and, with ``checkpoint_dir``, writes a weight
    file plus the optimizer state.
    """
    rng = np.random.default_rng(cfg.seed)
    params = net.to_vector()
    adam = adam or AdamState.zeros(params.size)
    history: list[dict] = []
    current = net.copy()
    initial = None
    stages = [(1, stage1, cfg.epochs_stage1), (2, stage2, cfg.epochs_stage2)]
    for stage, pairs, epochs in stages:
        if epochs == 0:
            continue
        if not pairs:
            raise ValueError(f"stage {stage} has {epochs} epochs but no training pairs")
        D, S, L = stack_pairs(pairs)
        train_idx, val_idx = split_validation(D.shape[0], cfg.val_fraction, rng)
        if initial is None:
            initial = evaluate_loss(current, D[train_idx], S[train_idx], L[train_idx], cfg.loss_weights)
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(train_idx)
            losses = []
            for b in range(0, order.size, cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                loss, grads = loss_and_gradient(
                    current, D[idx], S[idx], L[idx], cfg.loss_weights, exact_statistics=cfg.exact_statistics
                )
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at stage {stage} epoch {epoch}", current, history
                    )
                new_params, adam = adam_step(current.to_vector(), grads.to_vector(), adam, cfg.learning_rate)
                candidate = current.from_vector(new_params)
                if not np.all(np.isfinite(new_params)):
                    raise TrainingDivergedError(
                        f"non-finite parameters at stage {stage} epoch {epoch}", current, history
                    )
                current = candidate
                losses.append(loss * idx.size)
            train_loss = float(np.sum(losses) / order.size)
            val_loss = (
                evaluate_loss(current, D[val_idx], S[val_idx], L[val_idx], cfg.loss_weights) if val_idx.size else None
            )
            record = {
                "epoch": epoch,
                "stage": stage,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lambda_L": [p.lambda_L for p in current.layers],
                "lambda_S": [p.lambda_S for p in current.layers],
                "step": adam.step,
                "seconds": time.perf_counter() - t0,
            }
            history.append(record)
            if on_epoch is not None:
                on_epoch(record)
            if checkpoint_dir is not None:
                write_checkpoint(checkpoint_dir, f"stage{stage}_epoch{epoch:03d}", current, adam)
    return TrainResult(current, history, adam, initial)


def write_checkpoint(directory, name: str, net: CoronaNetwork, adam: AdamState) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.weights"
    save_weights(net, path)
    adam.save(directory / f"{name}.adam.npz")
    return path


def read_checkpoint(path) -> tuple[CoronaNetwork, AdamState]:
    path = Path(path)
    net = load_weights(path)
    return net, AdamState.load(path.with_suffix(".adam.npz"))
