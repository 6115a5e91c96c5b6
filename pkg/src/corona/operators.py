"""Measurement operators H1, H2 acting on Casorati matrices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

LinearMap = Callable[[np.ndarray], np.ndarray]


def _identity(x: np.ndarray) -> np.ndarray:
    return x


@dataclass(frozen=True)
class MeasurementOps:
    """The pair of linear maps in ``D = H1 L + H2 S``, with their adjoints."""

    h1_apply: LinearMap = _identity
    h1_adjoint: LinearMap = _identity
    h2_apply: LinearMap = _identity
    h2_adjoint: LinearMap = _identity
    is_identity: bool = True

    @classmethod
    def identity(cls) -> "MeasurementOps":
        return cls()

    @classmethod
    def from_matrices(cls, h1: np.ndarray, h2: np.ndarray) -> "MeasurementOps":
        """Dense operators left-multiplying the pixel axis of the Casorati matrix."""
        h1 = np.asarray(h1)
        h2 = np.asarray(h2)
        h1h = h1.conj().T
        h2h = h2.conj().T
        return cls(
            h1_apply=lambda x: h1 @ x,
            h1_adjoint=lambda y: h1h @ y,
            h2_apply=lambda x: h2 @ x,
            h2_adjoint=lambda y: h2h @ y,
            is_identity=False,
        )

    def forward(self, L: np.ndarray, S: np.ndarray) -> np.ndarray:
        return self.h1_apply(L) + self.h2_apply(S)

    def adjoint(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.h1_adjoint(r), self.h2_adjoint(r)

    def normal(self, L: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.adjoint(self.forward(L, S))


def adjoint_mismatch(ops: MeasurementOps, in_shape, out_shape=None, seed: int = 0) -> float:
    """Largest relative violation of ``<H x, y> = <x, H^H y>`` on random probes."""
    rng = np.random.default_rng(seed)
    out_shape = in_shape if out_shape is None else out_shape

    def rand(shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

    worst = 0.0
    for apply, adj in ((ops.h1_apply, ops.h1_adjoint), (ops.h2_apply, ops.h2_adjoint)):
        x, y = rand(in_shape), rand(out_shape)
        lhs = np.vdot(y, apply(x))
        rhs = np.vdot(adj(y), x)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return worst
