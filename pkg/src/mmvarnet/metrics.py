"""Reconstruction scores: normalised RMSE score and spectrally resolved scales."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.signal

from .errors import StructuralError, UndefinedScoreError
from .fields import FieldStack

log = logging.getLogger(__name__)

NSR_THRESHOLD = 0.5


@dataclass
class ResolvedScale:
    scale: float | None  # None when unresolved
    resolved: bool
    wavenumber: float | None = None
    excluded_bins: int = 0


@dataclass
class ScoreReport:
    mu: float
    sigma: float
    lambda_x: float | None
    lambda_t: float | None
    lambda_x_resolved: bool = True
    lambda_t_resolved: bool = True
    nrmse: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self, name: str) -> str:
        def fmt(v, ok):
            return f"{v:8.3f}" if ok and v is not None else "  unres."
        return (f"{name:<22s} {self.mu:6.3f} {self.sigma:6.3f} "
                f"{fmt(self.lambda_x, self.lambda_x_resolved)} {fmt(self.lambda_t, self.lambda_t_resolved)}")


def _arr(f) -> np.ndarray:
    return f.astype64() if isinstance(f, FieldStack) else np.asarray(f, dtype=np.float64)


def mu_sigma(x_hat, x_true) -> tuple[float, float, list[float]]:
    """(1 - mean_t nrmse, std_t nrmse, per-frame nrmse)."""
    a, b = _arr(x_hat), _arr(x_true)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch {a.shape} vs {b.shape}")
    series = []
    for t in range(b.shape[0]):
        rms_true = math.sqrt(np.mean(b[t] ** 2))
        if rms_true == 0:
            log.warning("frame %d has zero truth RMS; excluded from the score", t)
            continue
        series.append(math.sqrt(np.mean((a[t] - b[t]) ** 2)) / rms_true)
    if not series:
        raise UndefinedScoreError("every truth frame has zero RMS")
    s = np.asarray(series)
    return float(1.0 - s.mean()), float(s.std()), [float(v) for v in s]


def psd_1d(stack, axis: str, spacing: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Hann-windowed periodogram along ``x`` or ``t``, averaged over other axes.

    Returns (frequencies in cycles per unit of ``spacing``, power per bin).
    The power sums to the window-compensated variance: sum(power) equals
    sum((s - mean(s)) * w)**2 / sum(w**2), averaged over series.
    """
    arr = _arr(stack)
    if isinstance(stack, FieldStack) and spacing is None:
        spacing = stack.grid.dx if axis == "x" else stack.grid.dt
    spacing = 1.0 if spacing is None else spacing
    ax = {"x": -1, "t": 0, "y": -2}[axis]
    series = np.moveaxis(arr, ax, -1).reshape(-1, arr.shape[ax])
    n = series.shape[-1]
    w = scipy.signal.get_window("hann", n, fftbins=True)
    if np.sum(w ** 2) == 0:
        w = np.ones(n)
    s = (series - series.mean(axis=-1, keepdims=True)) * w
    spec = np.abs(np.fft.rfft(s, axis=-1)) ** 2 / (n * np.sum(w ** 2))
    if n % 2 == 0:
        spec[:, 1:-1] *= 2
    else:
        spec[:, 1:] *= 2
    freqs = np.fft.rfftfreq(n, d=spacing)
    return freqs, spec.mean(axis=0)


def resolved_scale(x_hat, x_true, axis: str, spacing: float | None = None,
                   threshold: float = NSR_THRESHOLD) -> ResolvedScale:
    """Smallest wavelength (or period) whose error-to-signal ratio stays below threshold.

    Walking up from the lowest non-zero bin, the first bin with NSR above
    the threshold ends the resolved band; the crossing is interpolated
    linearly in log wavenumber.  Bins with no truth power are skipped.
    """
    if spacing is None and isinstance(x_true, FieldStack):
        spacing = x_true.grid.dx if axis == "x" else x_true.grid.dt
    spacing = 1.0 if spacing is None else spacing
    err = _arr(x_hat) - _arr(x_true)
    k, p_err = psd_1d(err, axis, spacing)
    _, p_true = psd_1d(x_true, axis, spacing)
    k, p_err, p_true = k[1:], p_err[1:], p_true[1:]
    good = p_true > 1e-30 * max(p_true.max(), 1e-300)
    excluded = int((~good).sum())
    if excluded:
        log.warning("%d spectral bins without truth power excluded", excluded)
    k, nsr = k[good], p_err[good] / p_true[good]
    if len(k) == 0:
        raise UndefinedScoreError("truth spectrum is degenerate")
    if nsr[0] > threshold:
        return ResolvedScale(None, False, None, excluded)
    above = np.nonzero(nsr > threshold)[0]
    if len(above) == 0:
        kstar = k[-1]
    else:
        j = above[0]
        lk0, lk1 = math.log(k[j - 1]), math.log(k[j])
        frac = (threshold - nsr[j - 1]) / (nsr[j] - nsr[j - 1])
        kstar = math.exp(lk0 + frac * (lk1 - lk0))
    return ResolvedScale(float(1.0 / kstar), True, float(kstar), excluded)


def score(x_hat, x_true: FieldStack, threshold: float = NSR_THRESHOLD) -> ScoreReport:
    mu, sigma, series = mu_sigma(x_hat, x_true)
    lx = resolved_scale(x_hat, x_true, "x", threshold=threshold)
    lt = resolved_scale(x_hat, x_true, "t", threshold=threshold)
    return ScoreReport(mu, sigma, lx.scale, lt.scale, lx.resolved, lt.resolved, series)


def nsr_curve(x_hat, x_true: FieldStack, axis: str) -> tuple[np.ndarray, np.ndarray]:
    spacing = x_true.grid.dx if axis == "x" else x_true.grid.dt
    k, p_err = psd_1d(_arr(x_hat) - _arr(x_true), axis, spacing)
    _, p_true = psd_1d(x_true, axis, spacing)
    with np.errstate(divide="ignore", invalid="ignore"):
        return k[1:], p_err[1:] / p_true[1:]
