"""The unfolded L+S network: each layer is one proximal-gradient iteration whose
linear parts are learned complex convolutions and whose thresholds adapt to
the data.

Layer ``k``::

    zL = P5*L + P3*S + P1*D        L' = SVT_{thrL}(zL)
    zS = P6*L + P4*S + P2*D        S' = rowthresh_{thrS}(zS)
    thrL = sigmoid(lambda_L) * a_L * max|zL|
    thrS = sigmoid(lambda_S) * a_S * mean|zS|

Inputs may carry leading batch axes; statistics are per movie.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from corona.prox import row_soft_threshold
from corona.tensor import ConvKernel2D, conv2d, fold, svd, unfold

KERNEL_NAMES = ("p1", "p2", "p3", "p4", "p5", "p6")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class LayerParams:
    p1: ConvKernel2D
    p2: ConvKernel2D
    p3: ConvKernel2D
    p4: ConvKernel2D
    p5: ConvKernel2D
    p6: ConvKernel2D
    lambda_L: float = -3.0
    lambda_S: float = -3.0

    @property
    def kernels(self) -> tuple[ConvKernel2D, ...]:
        return tuple(getattr(self, n) for n in KERNEL_NAMES)

    def copy(self) -> "LayerParams":
        return LayerParams(*(k.copy() for k in self.kernels), self.lambda_L, self.lambda_S)


@dataclass
class CoronaNetwork:
    layers: list[LayerParams]
    a_L: float = 0.4
    a_S: float = 1.8

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("network needs at least one layer")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def copy(self) -> "CoronaNetwork":
        return CoronaNetwork([p.copy() for p in self.layers], self.a_L, self.a_S)

    def to_vector(self) -> np.ndarray:
        """Real view of all trainable parameters (re/im interleaved for complex)."""
        parts = []
        for p in self.layers:
            for k in p.kernels:
                parts.append(k.taps.ravel().view(np.float64))
                parts.append(np.array([k.bias.real, k.bias.imag]))
            parts.append(np.array([p.lambda_L, p.lambda_S]))
        return np.concatenate(parts)

    def from_vector(self, vec: np.ndarray) -> "CoronaNetwork":
        """New network with this one's structure and parameters taken from ``vec``."""
        vec = np.asarray(vec, dtype=np.float64)
        expected = sum(2 * k.taps.size + 2 for p in self.layers for k in p.kernels) + 2 * self.depth
        if vec.shape != (expected,):
            raise ValueError(f"parameter vector has shape {vec.shape}, expected ({expected},)")
        pos = 0
        layers = []
        for p in self.layers:
            kernels = []
            for k in p.kernels:
                n = 2 * k.taps.size
                taps = vec[pos:pos + n].copy().view(np.complex128).reshape(k.taps.shape)
                pos += n
                bias = complex(vec[pos], vec[pos + 1])
                pos += 2
                kernels.append(ConvKernel2D(taps, bias, k.padding))
            lam_l, lam_s = float(vec[pos]), float(vec[pos + 1])
            pos += 2
            layers.append(LayerParams(*kernels, lam_l, lam_s))
        return CoronaNetwork(layers, self.a_L, self.a_S)


def kernel_size_for_layer(index: int) -> int:
    """5x5 kernels for the first three layers, 3x3 afterwards (0-based index)."""
    return 5 if index < 3 else 3


def init_from_ista(
    K: int,
    lipschitz: float = 2.0,
    *,
    jitter: float = 0.0,
    seed: int | None = None,
    logit: float = -3.0,
    a_L: float = 0.4,
    a_S: float = 1.8,
) -> CoronaNetwork:
    """Network whose layers mimic ISTA iterations with identity measurements.

    Impulse kernels: ``P1 = P2 = 1/Lf``, ``P4 = P5 = 1 - 1/Lf``,
    ``P3 = P6 = -1/Lf``. ``jitter`` adds uniform noise of that relative size
    (w.r.t. the largest impulse tap) to every tap.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    inv = 1.0 / lipschitz
    values = {"p1": inv, "p2": inv, "p3": -inv, "p4": 1 - inv, "p5": 1 - inv, "p6": -inv}
    scale = max(abs(v) for v in values.values())
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(K):
        size = kernel_size_for_layer(k)
        kernels = []
        for name in KERNEL_NAMES:
            kern = ConvKernel2D.impulse(size, values[name])
            if jitter:
                noise = rng.uniform(-1, 1, (size, size)) + 1j * rng.uniform(-1, 1, (size, size))
                kern.taps += jitter * scale * noise
            kernels.append(kern)
        layers.append(LayerParams(*kernels, logit, logit))
    return CoronaNetwork(layers, a_L, a_S)


def init_random(K: int, *, seed: int = 0, scale: float = 0.1, a_L: float = 0.4, a_S: float = 1.8) -> CoronaNetwork:
    """Unstructured random initialization (ablation baseline)."""
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(K):
        size = kernel_size_for_layer(k)
        kernels = [
            ConvKernel2D(scale * (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))))
            for _ in KERNEL_NAMES
        ]
        layers.append(LayerParams(*kernels, 0.0, 0.0))
    return CoronaNetwork(layers, a_L, a_S)


def compute_thresholds(L, S, params: LayerParams, a_L: float, a_S: float):
    """Per-movie thresholds from the magnitudes of ``L`` (max) and ``S`` (mean)."""
    axes = (-3, -2, -1)
    thr_L = sigmoid(params.lambda_L) * a_L * np.max(np.abs(L), axis=axes)
    thr_S = sigmoid(params.lambda_S) * a_S * np.mean(np.abs(S), axis=axes)
    return thr_L, thr_S


@dataclass
class LayerTrace:
    L: np.ndarray
    S: np.ndarray
    zL: np.ndarray
    zS: np.ndarray
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    thr_L: np.ndarray
    thr_S: np.ndarray
    pinned: bool = False


@dataclass
class ForwardTrace:
    D: np.ndarray
    layers: list[LayerTrace] = field(default_factory=list)


def _pre_activations(D, L, S, p: LayerParams):
    zL = conv2d(L, p.p5) + conv2d(S, p.p3) + conv2d(D, p.p1)
    zS = conv2d(L, p.p6) + conv2d(S, p.p4) + conv2d(D, p.p2)
    return zL, zS


def _layer(D, L, S, params, a_L, a_S, thresholds=None):
    zL, zS = _pre_activations(D, L, S, params)
    if thresholds is None:
        thr_L, thr_S = compute_thresholds(zL, zS, params, a_L, a_S)
    else:
        lead = zL.shape[:-3]
        thr_L = np.broadcast_to(np.asarray(thresholds[0], dtype=float), lead)
        thr_S = np.broadcast_to(np.asarray(thresholds[1], dtype=float), lead)
    shape = zL.shape[-3:]
    U, s, V = svd(unfold(zL))
    shrunk = np.maximum(s - thr_L[..., None], 0.0)
    L_next = fold((U * shrunk[..., None, :]) @ np.swapaxes(V, -1, -2).conj(), shape)
    S_next = fold(row_soft_threshold(unfold(zS), thr_S), shape)
    trace = LayerTrace(L, S, zL, zS, U, s, V, thr_L, thr_S, thresholds is not None)
    return L_next, S_next, trace


def forward_layer(D, L, S, params: LayerParams, a_L: float = 0.4, a_S: float = 1.8, thresholds=None):
    """One unfolded iteration; ``thresholds=(thr_L, thr_S)`` pins them."""
    L_next, S_next, _ = _layer(np.asarray(D), np.asarray(L), np.asarray(S), params, a_L, a_S, thresholds)
    return L_next, S_next


def forward(D, net: CoronaNetwork, thresholds=None, *, return_trace: bool = False):
    """Run all layers from ``L = S = 0``. Returns ``(L_hat, S_hat)`` (and the trace).

    ``thresholds`` pins every layer's thresholds: one ``(thr_L, thr_S)`` pair
    for all layers, or a list with one pair per layer.
    """
    D = np.asarray(D)
    if not np.iscomplexobj(D):
        D = D.astype(np.complex128)
    if D.ndim < 3:
        raise ValueError("D must have shape (..., T, H, W)")
    L = np.zeros_like(D, dtype=np.complex128)
    S = np.zeros_like(D, dtype=np.complex128)
    trace = ForwardTrace(D)
    per_layer = thresholds is not None and isinstance(thresholds, list)
    for k, params in enumerate(net.layers):
        thr = thresholds[k] if per_layer else thresholds
        L, S, lt = _layer(D, L, S, params, net.a_L, net.a_S, thr)
        trace.layers.append(lt)
    if return_trace:
        return L, S, trace
    return L, S


# -- weight container --------------------------------------------------------
#
# Little-endian layout, version 1:
#   magic        8 bytes  b"CORONAW\x00"
#   version      uint32
#   K            uint32   number of layers
#   a_L, a_S     float64 x 2
#   per layer:
#     per kernel p1..p6:
#       kh, kw, ph, pw   uint32 x 4
#       taps             complex128 x kh*kw (row-major, re then im)
#       bias             complex128
#     lambda_L, lambda_S float64 x 2
#   crc32        uint32   over every preceding byte

MAGIC = b"CORONAW\x00"
WEIGHTS_VERSION = 1


class CorruptWeightsError(ValueError):
    """Weight file is truncated, has a bad checksum, or a malformed header."""


class WeightsVersionError(ValueError):
    """Weight file was written by an unsupported container version."""


def weights_to_bytes(net: CoronaNetwork) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II2d", WEIGHTS_VERSION, net.depth, net.a_L, net.a_S))
    for p in net.layers:
        for k in p.kernels:
            kh, kw = k.taps.shape
            buf.write(struct.pack("<4I", kh, kw, *k.padding))
            buf.write(k.taps.astype("<c16").tobytes())
            buf.write(np.array([k.bias], dtype="<c16").tobytes())
        buf.write(struct.pack("<2d", p.lambda_L, p.lambda_S))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def weights_from_bytes(data: bytes) -> CoronaNetwork:
    if len(data) < len(MAGIC) + 28 or data[: len(MAGIC)] != MAGIC:
        raise CorruptWeightsError("not a weight container (bad magic or too short)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if version != WEIGHTS_VERSION:
        raise WeightsVersionError(f"unsupported weight container version {version}")
    if zlib.crc32(body) != crc:
        raise CorruptWeightsError("checksum mismatch (truncated or damaged file)")
    try:
        pos = len(MAGIC)
        _, K, a_L, a_S = struct.unpack_from("<II2d", body, pos)
        pos += 24
        layers = []
        for _ in range(K):
            kernels = []
            for _ in KERNEL_NAMES:
                kh, kw, ph, pw = struct.unpack_from("<4I", body, pos)
                pos += 16
                n = kh * kw
                if pos + 16 * (n + 1) > len(body):
                    raise CorruptWeightsError("kernel payload runs past end of file")
                taps = np.frombuffer(body, "<c16", n, pos).reshape(kh, kw).astype(np.complex128)
                pos += 16 * n
                bias = complex(np.frombuffer(body, "<c16", 1, pos)[0])
                pos += 16
                kernels.append(ConvKernel2D(taps, bias, (ph, pw)))
            lam_l, lam_s = struct.unpack_from("<2d", body, pos)
            pos += 16
            layers.append(LayerParams(*kernels, lam_l, lam_s))
    except struct.error as exc:
        raise CorruptWeightsError(f"malformed weight file: {exc}") from exc
    if pos != len(body):
        raise CorruptWeightsError("trailing bytes after last layer")
    return CoronaNetwork(layers, a_L, a_S)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(net: CoronaNetwork, path) -> None:
    atomic_write_bytes(path, weights_to_bytes(net))


def load_weights(path) -> CoronaNetwork:
    return weights_from_bytes(Path(path).read_bytes())
