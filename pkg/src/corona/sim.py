"""Synthetic contrast-enhanced ultrasound movies with ground truth.

Microbubbles wander with random turns and accelerations; tissue is a
smooth random complex texture deformed every frame by block-wise random
"flow filters"; every component is blurred by an anisotropic Gaussian PSF.
Rows are the axial direction, columns the lateral direction. Positions are
in mm, velocities in mm/frame.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from corona.tensor import correlate2d


@dataclass(frozen=True)
class SimConfig:
    height: int = 128
    width: int = 128
    frames: int = 50
    pixel_pitch: float = 0.12  # mm
    dt: float = 0.01  # s
    max_mb_concentration: float = 130.0  # bubbles per cm^2
    min_mb_fraction: float = 0.0  # lower end of the random bubble count, as a fraction of the cap
    v_det: float = 0.24  # mm per frame
    accel_std: float = 0.05 * 0.12 / 0.01**2  # mm/s^2; multiplied by dt^2 per frame
    turn_range_deg: float = 30.0
    amp_jitter: tuple[float, float] = (0.9, 1.1)
    tissue_gaussians: int = 5
    tissue_lpf_size: int = 11
    tissue_lpf_sigma: float = 11 / 6
    bump_std_range: tuple[float, float] = (0.1, 0.4)  # fraction of the frame size
    phase_mean_range_deg: tuple[float, float] = (0.0, 180.0)
    phase_std_deg: float = 15.0
    flow_kernel_size: int = 4
    flow_kernel_count: int = 4
    flow_block: int = 4
    flow_perturb_std: float = 0.1
    flow_floor: float = 0.1
    psf_std_lateral: float = 0.14  # mm
    psf_std_axial: float = 0.32  # mm
    noise_scale: float = 0.01  # noise-to-tissue amplitude ratio (-40 dB)
    tissue_to_mb_db: float = 30.0
    normalize: bool = True  # scale so that max|D| = 1
    vessel_rows: tuple[int, int] | None = None  # confine bubbles to a horizontal band
    seed: int = 0

    def __post_init__(self):
        for name in ("height", "width", "frames", "tissue_gaussians", "tissue_lpf_size",
                     "flow_kernel_size", "flow_kernel_count", "flow_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("pixel_pitch", "dt", "psf_std_lateral", "psf_std_axial"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_mb_concentration", "v_det", "accel_std", "turn_range_deg",
                     "phase_std_deg", "flow_perturb_std", "flow_floor", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.min_mb_fraction <= 1.0:
            raise ValueError("min_mb_fraction must lie in [0, 1]")
        for name in ("amp_jitter", "bump_std_range", "phase_mean_range_deg"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be an ordered range")
        if not 10.0 <= self.tissue_to_mb_db <= 60.0:
            raise ValueError("tissue_to_mb_db must lie in [10, 60]")
        if self.vessel_rows is not None:
            r0, r1 = self.vessel_rows
            if not 0 <= r0 < r1 <= self.height:
                raise ValueError("vessel_rows must satisfy 0 <= start < stop <= height")

    @property
    def accel_std_per_frame(self) -> float:
        """Acceleration std in mm/frame^2 (``accel_std * dt**2``)."""
        return self.accel_std * self.dt**2

    @property
    def field_mm(self) -> tuple[float, float]:
        return self.height * self.pixel_pitch, self.width * self.pixel_pitch

    def spawn_box_mm(self) -> tuple[float, float, float, float]:
        """``(y0, y1, x0, x1)`` of the region where bubbles live."""
        h, w = self.field_mm
        if self.vessel_rows is None:
            return 0.0, h, 0.0, w
        r0, r1 = self.vessel_rows
        return r0 * self.pixel_pitch, r1 * self.pixel_pitch, 0.0, w

    def max_bubbles(self) -> int:
        y0, y1, x0, x1 = self.spawn_box_mm()
        area_cm2 = (y1 - y0) * (x1 - x0) / 100.0
        return int(math.floor(self.max_mb_concentration * area_cm2 + 1e-9))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["accel_std_per_frame"] = self.accel_std_per_frame
        d["accel_formula"] = "accel_std_per_frame = accel_std * dt**2"
        return d


@dataclass
class Bubbles:
    """Microbubble population; one row per bubble."""

    position: np.ndarray  # (n, 2) as (y, x) mm
    velocity: np.ndarray  # (n, 2) mm/frame
    amplitude: np.ndarray  # (n,) complex
    acceleration: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.acceleration is None:
            self.acceleration = np.zeros_like(self.position)

    def __len__(self) -> int:
        return self.amplitude.shape[0]

    def select(self, keep: np.ndarray) -> "Bubbles":
        return Bubbles(self.position[keep], self.velocity[keep], self.amplitude[keep], self.acceleration[keep])


@dataclass
class SimSample:
    D: np.ndarray
    L: np.ndarray
    S: np.ndarray
    N: np.ndarray
    config: SimConfig
    seed: int
    bubble_counts: np.ndarray = field(default=None)  # live bubbles per frame


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def spawn_bubbles(cfg: SimConfig, rng: np.random.Generator) -> Bubbles:
    """Random bubble count up to the concentration cap, uniform positions."""
    cap = cfg.max_bubbles()
    lo = int(math.ceil(cfg.min_mb_fraction * cap))
    n = int(rng.integers(lo, cap, endpoint=True)) if cap > 0 else 0
    y0, y1, x0, x1 = cfg.spawn_box_mm()
    pos = np.column_stack([rng.uniform(y0, y1, n), rng.uniform(x0, x1, n)])
    speed = np.maximum(0.0, cfg.v_det * rng.normal(1.0, 1.0, n))
    if cfg.vessel_rows is None:
        angle = rng.uniform(0.0, 2 * math.pi, n)
    else:
        angle = np.where(rng.random(n) < 0.5, 0.0, math.pi)  # along the band
    # angle measured from the lateral (x) axis; velocity stored as (vy, vx)
    vel = np.column_stack([speed * np.sin(angle), speed * np.cos(angle)])
    amp = _complex_normal(rng, n)
    return Bubbles(pos, vel, amp)


def step_bubbles(b: Bubbles, cfg: SimConfig, rng: np.random.Generator) -> Bubbles:
    """Advance one frame: turn, accelerate, move, jitter amplitude, drop escapees."""
    n = len(b)
    theta = np.deg2rad(rng.uniform(-cfg.turn_range_deg, cfg.turn_range_deg, n))
    vy, vx = b.velocity[:, 0], b.velocity[:, 1]
    c, s = np.cos(theta), np.sin(theta)
    vx_new = vx * c - vy * s
    vy_new = vx * s + vy * c
    acc = rng.normal(0.0, cfg.accel_std_per_frame, (n, 2))
    vel = np.column_stack([vy_new, vx_new]) + acc
    pos = b.position + vel
    amp = b.amplitude * rng.uniform(cfg.amp_jitter[0], cfg.amp_jitter[1], n)
    y0, y1, x0, x1 = cfg.spawn_box_mm()
    keep = (pos[:, 0] >= y0) & (pos[:, 0] < y1) & (pos[:, 1] >= x0) & (pos[:, 1] < x1)
    return Bubbles(pos, vel, amp, acc).select(keep)


def rasterize_bubbles(b: Bubbles, cfg: SimConfig) -> np.ndarray:
    """Deposit each bubble's amplitude on its nearest pixel (sums on collisions)."""
    frame = np.zeros((cfg.height, cfg.width), dtype=np.complex128)
    if len(b) == 0:
        return frame
    rows = np.floor(b.position[:, 0] / cfg.pixel_pitch).astype(int)
    cols = np.floor(b.position[:, 1] / cfg.pixel_pitch).astype(int)
    inside = (rows >= 0) & (rows < cfg.height) & (cols >= 0) & (cols < cfg.width)
    np.add.at(frame, (rows[inside], cols[inside]), b.amplitude[inside])
    return frame


def gaussian_kernel(size_rows: int, size_cols: int, std_rows: float, std_cols: float) -> np.ndarray:
    """Unit-sum sampled 2D Gaussian centred in the kernel."""
    y = np.arange(size_rows) - (size_rows - 1) / 2
    x = np.arange(size_cols) - (size_cols - 1) / 2
    k = np.exp(-0.5 * (y[:, None] / std_rows) ** 2 - 0.5 * (x[None, :] / std_cols) ** 2)
    return k / k.sum()


def _same(frame, kernel):
    kh, kw = kernel.shape
    pad = (((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2))
    return correlate2d(frame, kernel, pad)


def gen_tissue_base(cfg: SimConfig, rng: np.random.Generator, field: np.ndarray | None = None) -> np.ndarray:
    """Initial complex tissue frame ``B * exp(j*theta)``.

    ``B`` is the magnitude of a low-passed product of a sum of Gaussian bumps
    and a complex normal field; ``theta ~ N(alpha, phase_std)`` with ``alpha``
    uniform in ``phase_mean_range_deg``. ``field`` overrides the random field.
    """
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    bumps = np.zeros((h, w))
    lo, hi = cfg.bump_std_range
    for _ in range(cfg.tissue_gaussians):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy, sx = rng.uniform(lo, hi) * h, rng.uniform(lo, hi) * w
        bumps += np.exp(-0.5 * ((yy - cy) / sy) ** 2 - 0.5 * ((xx - cx) / sx) ** 2)
    if field is None:
        field = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    n = cfg.tissue_lpf_size
    envelope = np.abs(_same(bumps * field, gaussian_kernel(n, n, cfg.tissue_lpf_sigma, cfg.tissue_lpf_sigma)))
    alpha = np.deg2rad(rng.uniform(*cfg.phase_mean_range_deg))
    theta = rng.normal(alpha, np.deg2rad(cfg.phase_std_deg), (h, w))
    return envelope * np.exp(1j * theta)


def init_flow_filters(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    k = cfg.flow_kernel_size
    f = rng.uniform(0.0, 1.0, (cfg.flow_kernel_count, k, k))
    return f / f.sum(axis=(1, 2), keepdims=True)


def deform_tissue(T_prev, flow_filters, cfg: SimConfig, rng: np.random.Generator, *, perturb: bool = True):
    """One frame of tissue motion. Returns ``(T_next, filters)``.

    With ``perturb`` the filters get ``N(0, flow_perturb_std)`` noise, are
    floored at ``flow_floor`` and renormalized; otherwise they are used as is.
    Each ``flow_block`` square of the output is copied from one uniformly
    chosen filtered candidate.
    """
    filters = np.asarray(flow_filters, dtype=float)
    if perturb:
        filters = filters + rng.normal(0.0, cfg.flow_perturb_std, filters.shape)
        filters = np.maximum(filters, cfg.flow_floor)
        filters = filters / filters.sum(axis=(1, 2), keepdims=True)
    candidates = np.stack([_same(T_prev, f) for f in filters])
    h, w = T_prev.shape
    bs = cfg.flow_block
    nby, nbx = -(-h // bs), -(-w // bs)
    choice = rng.integers(0, filters.shape[0], (nby, nbx))
    pick = np.repeat(np.repeat(choice, bs, axis=0), bs, axis=1)[:h, :w]
    T_next = np.take_along_axis(candidates, pick[None], axis=0)[0]
    return T_next, filters


def psf_kernel(cfg: SimConfig) -> np.ndarray:
    """Unit-sum anisotropic Gaussian, extent ``+-3 sigma`` (odd), axial along rows."""
    sr = cfg.psf_std_axial / cfg.pixel_pitch
    sc = cfg.psf_std_lateral / cfg.pixel_pitch
    return gaussian_kernel(2 * math.ceil(3 * sr) + 1, 2 * math.ceil(3 * sc) + 1, sr, sc)


def apply_psf(frame, cfg: SimConfig) -> np.ndarray:
    """Blur the last two axes with the PSF (zero padding, same size).

    The Gaussian is separable, so it is applied as an axial pass followed by
    a lateral pass; the result equals correlation with :func:`psf_kernel`.
    """
    k = psf_kernel(cfg)
    col = k.sum(axis=1, keepdims=True)
    row = k.sum(axis=0, keepdims=True)
    return _same(_same(np.asarray(frame), col), row)


def simulate(cfg: SimConfig = SimConfig()) -> SimSample:
    """Generate one ``(D, L, S, N)`` sample; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.frames, cfg.height, cfg.width)
    mb = np.zeros(shape, dtype=np.complex128)
    tissue = np.zeros(shape, dtype=np.complex128)
    noise = _complex_normal(rng, shape)

    bubbles = spawn_bubbles(cfg, rng)
    T = gen_tissue_base(cfg, rng)
    filters = init_flow_filters(cfg, rng)
    counts = np.zeros(cfg.frames, dtype=int)
    for t in range(cfg.frames):
        counts[t] = len(bubbles)
        mb[t] = rasterize_bubbles(bubbles, cfg)
        tissue[t] = T
        if t + 1 < cfg.frames:
            bubbles = step_bubbles(bubbles, cfg, rng)
            T, filters = deform_tissue(T, filters, cfg, rng)

    S = apply_psf(mb, cfg)
    L = apply_psf(tissue, cfg)
    N = apply_psf(noise, cfg)
    p_l = np.vdot(L, L).real
    p_s = np.vdot(S, S).real
    p_n = np.vdot(N, N).real
    if p_s > 0 and p_l > 0:
        S = S * math.sqrt(p_l / p_s / 10 ** (cfg.tissue_to_mb_db / 10))
    if p_n > 0:
        N = N * (cfg.noise_scale * math.sqrt(p_l / p_n) if p_l > 0 else cfg.noise_scale)
    if cfg.normalize:
        peak = np.max(np.abs(L + S + N))
        if peak > 0:
            L, S, N = L / peak, S / peak, N / peak
    D = L + S + N
    return SimSample(D, L, S, N, cfg, cfg.seed, counts)


def lps_instance(shape=(16, 20, 20), rank: int = 2, support: float = 0.05, seed: int = 0, sparse_scale: float = 2.0):
    """Random ``D = L* + S*`` Casorati test problem.

    ``L*`` has the given rank; ``S*`` is nonzero on a ``support`` fraction of
    rows (pixels). Returns Casorati matrices ``(D, L*, S*)``.
    """
    rng = np.random.default_rng(seed)
    t, h, w = shape
    m = h * w
    A = _complex_normal(rng, (m, rank))
    B = _complex_normal(rng, (rank, t))
    L = A @ B
    S = np.zeros((m, t), dtype=np.complex128)
    rows = rng.choice(m, max(1, int(round(support * m))), replace=False)
    S[rows] = sparse_scale * _complex_normal(rng, (rows.size, t))
    return L + S, L, S
