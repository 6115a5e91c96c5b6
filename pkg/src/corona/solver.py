"""L+S proximal-gradient solvers (ISTA and FISTA) on Casorati matrices.

Minimizes ``0.5||D - H1 L - H2 S||_F^2 + lambda1 ||L||_* + lambda2 ||S||_{1,2}``
starting from ``L = S = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from corona.operators import MeasurementOps
from corona.prox import RegWeights, _svt_parts, l12_norm, row_soft_threshold
from corona.tensor import spectral_norm

log = logging.getLogger(__name__)


class SolverDivergedError(RuntimeError):
    """An iterate became non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    weights: RegWeights = RegWeights()
    max_iters: int = 30_000
    rel_tol: float = 1e-7
    lipschitz: float | None = None  # None: estimate by power iteration
    variant: Literal["ista", "fista"] = "fista"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise ValueError("rel_tol must be >= 0")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("lipschitz must be positive")
        if self.variant not in ("ista", "fista"):
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class SolverState:
    L: np.ndarray
    S: np.ndarray
    iter: int = 0
    lipschitz: float = 1.0
    momentum_t: float = 1.0
    L_bar: np.ndarray | None = None
    S_bar: np.ndarray | None = None
    objective_history: list[float] = field(default_factory=list)
    converged: bool = False


def lipschitz_constant(ops: MeasurementOps, shape) -> float:
    """Spectral norm of ``A^H A`` for ``A = [H1 H2]`` on matrices of ``shape``."""
    return spectral_norm(ops.normal, (shape, shape))


def fista_momentum(t: float) -> float:
    return (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0


def gradient_step(L, S, D, ops: MeasurementOps, lipschitz: float):
    """Forward (gradient) step on the quadratic term.

    ``G1 = (I - H1^H H1 / Lf) L - H1^H H2 S / Lf + H1^H D / Lf`` and the
    symmetric expression for ``G2``.
    """
    if not lipschitz > 0:
        raise ValueError("lipschitz must be positive")
    if np.shape(L) != np.shape(S):
        raise ValueError("L and S shapes differ")
    resid = ops.forward(L, S) - D
    g1, g2 = ops.adjoint(resid)
    return L - g1 / lipschitz, S - g2 / lipschitz


def _prox(G1, G2, weights: RegWeights, lf: float):
    L, s_shrunk = _svt_parts(G1, weights.lambda1 / lf)
    S = row_soft_threshold(G2, weights.lambda2 / lf)
    return L, S, float(np.sum(s_shrunk))


def _fit(D, L, S, ops) -> float:
    return 0.5 * float(np.linalg.norm(D - ops.forward(L, S)) ** 2)


def solve(
    D,
    ops: MeasurementOps | None = None,
    cfg: SolverConfig = SolverConfig(),
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
):
    """Run the configured variant. Returns ``(L, S, state)``.

    ``D`` is a Casorati matrix. ``callback(k, L, S)`` sees every iterate.
    """
    ops = ops or MeasurementOps.identity()
    D = np.asarray(D)
    if not np.iscomplexobj(D):
        D = D.astype(np.complex128)
    shape = D.shape
    lf = cfg.lipschitz if cfg.lipschitz is not None else lipschitz_constant(ops, shape)
    w = cfg.weights
    fista = cfg.variant == "fista"

    st = SolverState(L=np.zeros(shape, complex), S=np.zeros(shape, complex), lipschitz=lf)
    Lb, Sb = st.L, st.S
    for k in range(1, cfg.max_iters + 1):
        G1, G2 = gradient_step(Lb, Sb, D, ops, lf)
        L_new, S_new, nuc = _prox(G1, G2, w, lf)
        if not (np.all(np.isfinite(L_new)) and np.all(np.isfinite(S_new))):
            raise SolverDivergedError(f"non-finite iterate at iteration {k} (Lf={lf:g})")
        st.objective_history.append(_fit(D, L_new, S_new, ops) + w.lambda1 * nuc + w.lambda2 * l12_norm(S_new))

        dL, dS = L_new - st.L, S_new - st.S
        change = math.sqrt(np.vdot(dL, dL).real + np.vdot(dS, dS).real)
        ref = math.sqrt(np.vdot(st.L, st.L).real + np.vdot(st.S, st.S).real)
        if fista:
            t_next = fista_momentum(st.momentum_t)
            beta = (st.momentum_t - 1.0) / t_next
            Lb = L_new + beta * dL
            Sb = S_new + beta * dS
            st.momentum_t = t_next
            st.L_bar, st.S_bar = Lb, Sb
        else:
            Lb, Sb = L_new, S_new
        st.L, st.S, st.iter = L_new, S_new, k
        if callback is not None:
            callback(k, L_new, S_new)
        if change / max(ref, 1e-300) < cfg.rel_tol:
            st.converged = True
            break
    log.debug("%s stopped after %d iterations (converged=%s)", cfg.variant, st.iter, st.converged)
    return st.L, st.S, st


def ista_solve(D, ops: MeasurementOps | None = None, cfg: SolverConfig = SolverConfig(), callback=None):
    """Plain L+S ISTA."""
    return solve(D, ops, _with_variant(cfg, "ista"), callback)


def fista_solve(D, ops: MeasurementOps | None = None, cfg: SolverConfig = SolverConfig(), callback=None):
    """ISTA with FISTA momentum on the stacked ``(L, S)`` pair, no restarts."""
    return solve(D, ops, _with_variant(cfg, "fista"), callback)


def _with_variant(cfg: SolverConfig, variant: str) -> SolverConfig:
    if cfg.variant == variant:
        return cfg
    return SolverConfig(cfg.weights, cfg.max_iters, cfg.rel_tol, cfg.lipschitz, variant)


def solve_movie(movie, ops=None, cfg: SolverConfig = SolverConfig(), callback=None):
    """Convenience wrapper: movie in, ``(L, S, state)`` movies out."""
    from corona.tensor import fold, unfold

    movie = np.asarray(movie)
    L, S, st = solve(unfold(movie), ops, cfg, callback)
    return fold(L, movie.shape), fold(S, movie.shape), st
