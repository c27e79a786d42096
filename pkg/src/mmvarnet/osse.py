"""Observing-system simulation at desk scale.

Truth is a periodic Gaussian-like random field synthesised spectrally with
fixed amplitudes and seeded phases, translated by a uniform advection and
slowly decorrelated by a phase random walk.  SST is the half-power
Laplacian of SSH (SQG-like); SSH sampling combines nadir tracks and a
wide swath with a nadir gap.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, StructuralError
from .fields import FieldStack, GridSpec, ObsModality, ObsSet, StateSeq

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(60, 64, 64, 0.05, 1.0))
    slope: float = 4.0
    wavelength: float = 16.0  # energy-containing wavelength, grid cells
    advection: tuple[float, float] = (0.5, 0.25)  # cells per frame along (x, y)
    phase_diffusion: float = 0.15  # rad per frame, at the Nyquist wavenumber
    amplitude: float = 1.0
    sigma_obs: float = 0.02
    sigma_sst: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.slope > 0:
            raise ConfigError("spectral slope must be > 0")
        if self.wavelength < 2:
            raise ConfigError("energy-containing wavelength must be >= 2 grid steps")
        if self.sigma_obs < 0 or self.sigma_sst < 0 or self.phase_diffusion < 0:
            raise ConfigError("noise levels must be >= 0")


@dataclass(frozen=True)
class MaskConfig:
    n_nadir_tracks: int = 1
    track_width: float = 1.0
    swath_width: float = 3.0
    swath_gap: float = 1.0
    swath_speed: float = 11.0  # cells the swath advances per day
    swath_angle: float = 80.0  # degrees from the x axis
    track_angle_range: tuple[float, float] = (20.0, 160.0)
    target_coverage: float = 0.05

    def __post_init__(self):
        if not 0 < self.target_coverage <= 1:
            raise ConfigError("target coverage must be in (0, 1]")
        if self.n_nadir_tracks < 0 or self.track_width <= 0 or self.swath_width < 0:
            raise ConfigError("track counts and widths must be non-negative")
        if self.swath_gap < 0 or self.swath_gap > self.swath_width:
            raise ConfigError("swath gap must lie within the swath width")


# ---------------------------------------------------------------- truth

def _wavenumbers(n_y: int, n_x: int) -> tuple[np.ndarray, np.ndarray]:
    """Angular wavenumbers in radians per grid cell, shape (n_y, n_x)."""
    ky = 2 * np.pi * np.fft.fftfreq(n_y)
    kx = 2 * np.pi * np.fft.fftfreq(n_x)
    return np.meshgrid(kx, ky)


def spectrum_amplitude(n_y: int, n_x: int, slope: float, wavelength: float) -> np.ndarray:
    """sqrt of the 2-D power spectrum (k^2 + k0^2)^(-slope/2); mean and Nyquist rows zeroed."""
    kx, ky = _wavenumbers(n_y, n_x)
    k0 = 2 * np.pi / wavelength
    amp = (kx ** 2 + ky ** 2 + k0 ** 2) ** (-slope / 4.0)
    amp[0, 0] = 0.0
    if n_y % 2 == 0:
        amp[n_y // 2, :] = 0.0
    if n_x % 2 == 0:
        amp[:, n_x // 2] = 0.0
    return amp


def _hermitian_phase(rng: np.random.Generator, shape) -> np.ndarray:
    return np.angle(np.fft.fft2(rng.standard_normal(shape)))


def _antisymmetric_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Unit-variance field n(k) with n(-k) = -n(k)."""
    im = np.fft.fft2(rng.standard_normal(shape)).imag
    return im / math.sqrt(shape[0] * shape[1] / 2.0)


def synth_truth(cfg: SynthConfig) -> FieldStack:
    g = cfg.grid
    rng = np.random.default_rng(cfg.seed)
    amp = spectrum_amplitude(g.n_y, g.n_x, cfg.slope, cfg.wavelength)
    kx, ky = _wavenumbers(g.n_y, g.n_x)
    kmag = np.hypot(kx, ky)
    phase = _hermitian_phase(rng, (g.n_y, g.n_x))
    u0, v0 = cfg.advection
    out = np.empty(g.shape)
    for t in range(g.n_t):
        if t > 0 and cfg.phase_diffusion > 0:
            phase = phase + cfg.phase_diffusion * (kmag / np.pi) * _antisymmetric_noise(rng, (g.n_y, g.n_x))
        shift = -(kx * u0 + ky * v0) * t
        frame = np.fft.ifft2(amp * np.exp(1j * (phase + shift))).real
        out[t] = frame
    out -= out.mean(axis=(1, 2), keepdims=True)
    rms = np.sqrt(np.mean(out ** 2))
    if rms > 0:
        out *= cfg.amplitude / rms
    return FieldStack(g, out)


def derive_sst(ssh: FieldStack, sigma_sst: float = 0.0, seed: int = 0,
               exponent: float = 0.5) -> FieldStack:
    """(-Laplacian)^exponent of each frame, computed spectrally, plus seeded noise.

    Wavenumbers are in radians per grid cell, so a single mode
    ``sin(k j)`` maps to ``|k|^(2 exponent) sin(k j)``.
    """
    g = ssh.grid
    kx, ky = _wavenumbers(g.n_y, g.n_x)
    mult = (kx ** 2 + ky ** 2) ** exponent
    spec = np.fft.fft2(ssh.astype64(), axes=(1, 2)) * mult
    sst = np.fft.ifft2(spec, axes=(1, 2)).real
    if sigma_sst > 0:
        noise = np.random.default_rng(seed).standard_normal(g.shape) * sigma_sst
        sst = sst + noise - noise.mean(axis=(1, 2), keepdims=True)
    return FieldStack(g, sst)


def radial_spectrum(frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Annulus-averaged 2-D periodogram of one frame (radians per cell, power)."""
    n_y, n_x = frame.shape
    kx, ky = _wavenumbers(n_y, n_x)
    kmag = np.hypot(kx, ky)
    power = np.abs(np.fft.fft2(frame)) ** 2
    dk = 2 * np.pi / max(n_y, n_x)
    bins = np.round(kmag / dk).astype(int)
    nb = min(n_y, n_x) // 2
    k = np.arange(1, nb) * dk
    p = np.array([power[bins == b].mean() for b in range(1, nb)])
    return k, p


def fit_spectral_slope(stack: FieldStack, k_min: float, k_max: float) -> float:
    """Least-squares slope of log power vs log k over [k_min, k_max]."""
    ps = []
    for frame in stack.astype64():
        k, p = radial_spectrum(frame)
        ps.append(p)
    p = np.mean(ps, axis=0)
    sel = (k >= k_min) & (k <= k_max) & (p > 0)
    if sel.sum() < 3:
        raise ValueError("fewer than three spectral bins in the fit band")
    slope, _ = np.polyfit(np.log(k[sel]), np.log(p[sel]), 1)
    return float(slope)


# ---------------------------------------------------------------- sampling masks

def _band(n_y: int, n_x: int, angle_deg: float, offset: float, half_lo: float,
          half_hi: float) -> np.ndarray:
    """Cells whose signed distance to a line through the domain centre lies in [half_lo, half_hi)."""
    yy, xx = np.mgrid[0:n_y, 0:n_x].astype(float)
    th = math.radians(angle_deg)
    # normal to a line with direction (cos th, sin th)
    d = -(xx - (n_x - 1) / 2) * math.sin(th) + (yy - (n_y - 1) / 2) * math.cos(th) - offset
    return (d >= half_lo) & (d < half_hi)


def nadir_mask(cfg: MaskConfig, grid: GridSpec, day: int, seed: int) -> np.ndarray:
    """One day of nadir tracks: straight lines at seeded angles and offsets."""
    rng = np.random.default_rng([seed, day, 1])
    m = np.zeros((grid.n_y, grid.n_x), dtype=bool)
    lo, hi = cfg.track_angle_range
    span = min(grid.n_y, grid.n_x) / 4
    for _ in range(cfg.n_nadir_tracks):
        angle = rng.uniform(lo, hi)
        offset = rng.uniform(-span, span)
        m |= _band(grid.n_y, grid.n_x, angle, offset, -cfg.track_width / 2, cfg.track_width / 2)
    return m.astype(np.float32)


def swath_mask(cfg: MaskConfig, grid: GridSpec, day: int, seed: int) -> np.ndarray:
    """One day of wide-swath sampling: a band with a central nadir gap.

    The band's cross-track offset advances by ``swath_speed`` cells a day and
    wraps around the domain.
    """
    if cfg.swath_width <= 0:
        return np.zeros((grid.n_y, grid.n_x), dtype=np.float32)
    rng = np.random.default_rng([seed, 0, 2])
    extent = max(grid.n_y, grid.n_x) / 2
    start = rng.uniform(-extent, extent)
    offset = (start + cfg.swath_speed * day + extent) % (2 * extent) - extent
    w, gap = cfg.swath_width / 2, cfg.swath_gap / 2
    m = _band(grid.n_y, grid.n_x, cfg.swath_angle, offset, -w, -gap)
    m |= _band(grid.n_y, grid.n_x, cfg.swath_angle, offset, gap, w)
    return m.astype(np.float32)


def daily_masks(cfg: MaskConfig, grid: GridSpec, seed: int) -> FieldStack:
    """Combined nadir + swath masks for every frame of ``grid``.

    Extra nadir tracks are added on days whose coverage falls more than two
    points below the target.
    """
    frames = []
    for day in range(grid.n_t):
        m = np.maximum(nadir_mask(cfg, grid, day, seed), swath_mask(cfg, grid, day, seed))
        extra = 0
        while m.mean() < cfg.target_coverage - 0.015 and extra < 8:
            extra += 1
            more = MaskConfig(**{**_asdict(cfg), "n_nadir_tracks": 1})
            m = np.maximum(m, nadir_mask(more, grid, day, seed + 7919 * extra))
        frames.append(m)
    return FieldStack(grid, np.stack(frames))


def _asdict(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def coverage(masks: FieldStack) -> np.ndarray:
    return masks.astype64().mean(axis=(1, 2))


# ---------------------------------------------------------------- dataset

@dataclass
class TrainSample:
    x_true: FieldStack
    obs: ObsSet
    x0: StateSeq
    start: int = 0


@dataclass(frozen=True)
class SplitConfig:
    test: tuple[int, int] = (0, 21)
    val: tuple[int, int] = (21, 28)

    def __post_init__(self):
        for a, b in (self.test, self.val):
            if a < 0 or b < a:
                raise ConfigError(f"bad block [{a}, {b})")


@dataclass
class Dataset:
    train: list[TrainSample]
    val: list[TrainSample]
    test: list[TrainSample]
    split: SplitConfig
    window: int

    def indices(self) -> dict[str, list[int]]:
        return {name: [s.start for s in getattr(self, name)] for name in ("train", "val", "test")}


def window_starts(n_t: int, window: int, stride: int, split: SplitConfig) -> dict[str, list[int]]:
    """Window start frames per split; train and val windows never touch the test block."""
    def inside(s, block):
        return block[0] <= s and s + window <= block[1]

    def overlaps(s, block):
        return s < block[1] and block[0] < s + window

    test = list(range(split.test[0], split.test[1] - window + 1, window))
    val = [s for s in range(split.val[0], split.val[1] - window + 1, window)
           if not overlaps(s, split.test)]
    train = [s for s in range(0, n_t - window + 1, stride)
             if not overlaps(s, split.test) and not overlaps(s, split.val)]
    return {"train": train, "val": val, "test": test}


def make_dataset(truth: FieldStack, sst: FieldStack, masks: FieldStack, window: int = 7,
                 stride: int = 1, sigma_obs: float = 0.0,
                 oi_baseline: Callable[[ObsModality], FieldStack] | None = None,
                 split: SplitConfig | None = None, seed: int = 0,
                 sst_scale: float | None = None,
                 oi_products: dict[int, FieldStack] | None = None) -> Dataset:
    """Slice the record into windows with y1 (masked noisy SSH), y2 (OI of y1), y3 (SST).

    ``oi_baseline`` maps a y1 window to a gap-free field; ``oi_products``
    instead supplies precomputed fields keyed by window start.  With
    neither, y2 is omitted.  ``sst_scale`` divides the SST (defaults to its record RMS).
    """
    g = truth.grid
    if sst.grid != g or masks.grid != g:
        raise StructuralError("truth, sst and masks must share a grid")
    if window > g.n_t:
        raise StructuralError(f"window {window} longer than record {g.n_t}")
    split = split or SplitConfig(test=(0, 0), val=(0, 0))
    rng = np.random.default_rng([seed, 3])
    noisy = truth.astype64() + sigma_obs * rng.standard_normal(g.shape)
    y1_full = ObsModality.masked(1, FieldStack(g, noisy), masks)
    sst_arr = sst.astype64()
    if sst_scale is None:
        sst_scale = float(np.sqrt(np.mean(sst_arr ** 2))) or 1.0
    y3_full = ObsModality.dense(3, FieldStack(g, sst_arr / sst_scale))

    starts = window_starts(g.n_t, window, stride, split)
    if oi_products is None and oi_baseline is None:
        log.info("no y2 source given; windows start from a zero state")
    out = {}
    for name, ss in starts.items():
        samples = []
        for s in ss:
            y1 = y1_full.frames(s, s + window)
            mods = [y1]
            if oi_products is not None:
                if s not in oi_products:
                    raise StructuralError(f"no OI product for window starting at {s}")
                mods.append(ObsModality.dense(2, oi_products[s]))
            elif oi_baseline is not None:
                mods.append(ObsModality.dense(2, oi_baseline(y1)))
            mods.append(y3_full.frames(s, s + window))
            obs = ObsSet(tuple(mods))
            samples.append(TrainSample(truth.frames(s, s + window), obs, init_state(obs, warn=False), s))
        out[name] = samples
    return Dataset(out["train"], out["val"], out["test"], split, window)


def init_state(obs: ObsSet, warn: bool = True) -> StateSeq:
    """Large-scale component from the gap-free SSH product y2; zero anomaly."""
    g = obs.grid
    y2 = obs.get(2)
    if y2 is not None:
        return StateSeq(y2.values, FieldStack.zeros(g))
    if warn and obs.get(1) is not None:
        log.warning("no gap-free SSH product (modality 2); starting from a zero state")
    return StateSeq.zeros(g)


def spectral_slope_band(cfg: SynthConfig) -> tuple[float, float]:
    """Fit band for slope checks: well above k0, below the Nyquist wavenumber."""
    k0 = 2 * np.pi / cfg.wavelength
    return 4 * k0, 0.9 * np.pi
