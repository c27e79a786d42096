"""Reference reconstructions: optimal interpolation and direct U-Net inversion."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, NumericalError, StructuralError
from .fields import FieldStack, GridSpec, ObsModality, ObsSet
from .gradcore import ParamStore, Tensor, no_record
from .priornet import PhiConfig, phi_apply_t, phi_init

log = logging.getLogger(__name__)


class EmptyObservationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OIConfig:
    length_x: float = 0.15  # degrees
    length_t: float = 5.0  # days
    noise_var: float = 0.1
    signal_var: float = 1.0
    max_obs: int = 1500
    thinning: int = 1

    def __post_init__(self):
        if not (self.length_x > 0 and self.length_t > 0 and self.signal_var > 0):
            raise ConfigError("OI scales and signal variance must be > 0")
        if self.noise_var < 0:
            raise ConfigError("OI noise variance must be >= 0")
        if self.max_obs < 1 or self.thinning < 1:
            raise ConfigError("max_obs and thinning must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _select(obs: ObsModality, cfg: OIConfig) -> tuple[np.ndarray, np.ndarray]:
    """Observed (t, y, x) indices and values after stride thinning."""
    idx = np.argwhere(obs.mask.data > 0)
    stride = cfg.thinning
    if len(idx) > 0:
        stride = max(stride, int(np.ceil(len(idx) / cfg.max_obs)))
    idx = idx[::stride]
    vals = obs.values.astype64()[idx[:, 0], idx[:, 1], idx[:, 2]] if len(idx) else np.zeros(0)
    return idx, vals


def _kernels(idx: np.ndarray, grid: GridSpec, cfg: OIConfig):
    """Per-axis covariance factors between grid coordinates and observations."""
    t = np.arange(grid.n_t)[:, None] - idx[None, :, 0]
    y = np.arange(grid.n_y)[:, None] - idx[None, :, 1]
    x = np.arange(grid.n_x)[:, None] - idx[None, :, 2]
    kt = np.exp(-0.5 * (t * grid.dt / cfg.length_t) ** 2)
    ky = np.exp(-0.5 * (y * grid.dx / cfg.length_x) ** 2)
    kx = np.exp(-0.5 * (x * grid.dx / cfg.length_x) ** 2)
    return kt, ky, kx


def _obs_covariance(idx: np.ndarray, grid: GridSpec, cfg: OIConfig) -> np.ndarray:
    d = idx[:, None, :] - idx[None, :, :]
    q = ((d[..., 0] * grid.dt / cfg.length_t) ** 2
         + ((d[..., 1] * grid.dx) ** 2 + (d[..., 2] * grid.dx) ** 2) / cfg.length_x ** 2)
    return cfg.signal_var * np.exp(-0.5 * q)


def _factor(idx, grid, cfg):
    K = _obs_covariance(idx, grid, cfg)
    K[np.diag_indices_from(K)] += cfg.noise_var + 1e-8 * cfg.signal_var
    try:
        return scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("OI covariance is not positive definite") from exc


def optimal_interp(obs: ObsModality, cfg: OIConfig, grid: GridSpec | None = None) -> FieldStack:
    """Gauss-Markov estimate on ``grid`` from the observed cells of ``obs``.

    The mean of the selected observations is removed before the solve and
    restored afterwards.
    """
    grid = grid or obs.grid
    if obs.grid != grid:
        raise StructuralError("observation and target grids differ")
    idx, vals = _select(obs, cfg)
    if len(idx) == 0:
        warnings.warn("no observations: returning the zero prior mean", EmptyObservationWarning)
        return FieldStack.zeros(grid)
    mean = float(vals.mean())
    factor = _factor(idx, grid, cfg)
    alpha = scipy.linalg.cho_solve(factor, vals - mean, check_finite=False)
    kt, ky, kx = _kernels(idx, grid, cfg)
    out = np.empty(grid.shape)
    for t in range(grid.n_t):
        out[t] = (ky * (cfg.signal_var * kt[t] * alpha)) @ kx.T
    return FieldStack(grid, out + mean)


def oi_posterior_variance(obs: ObsModality, cfg: OIConfig, grid: GridSpec | None = None) -> np.ndarray:
    """Pointwise posterior variance of the OI estimate (no mean removal)."""
    grid = grid or obs.grid
    idx, _ = _select(obs, cfg)
    if len(idx) == 0:
        return np.full(grid.shape, cfg.signal_var)
    factor = _factor(idx, grid, cfg)
    kt, ky, kx = _kernels(idx, grid, cfg)
    out = np.empty(grid.shape)
    for t in range(grid.n_t):
        k = cfg.signal_var * (kt[t][None, None, :] * ky[:, None, :] * kx[None, :, :])
        k = k.reshape(-1, len(idx))
        sol = scipy.linalg.cho_solve(factor, k.T, check_finite=False)
        out[t] = (cfg.signal_var - np.einsum("ij,ji->i", k, sol)).reshape(grid.n_y, grid.n_x)
    return out


# ---------------------------------------------------------------- direct inversion

def direct_config(n_t: int, base_channels: int = 16) -> PhiConfig:
    """U-Net mapping (masked y1, mask, y2, y3) to the SSH field, no identity skip."""
    return PhiConfig(n_t=n_t, base_channels=base_channels, in_channels=4 * n_t,
                     out_channels=n_t, skip=False)


def direct_init(n_t: int, seed: int, base_channels: int = 16) -> ParamStore:
    return phi_init(direct_config(n_t, base_channels), seed, prefix="direct")


def direct_inputs(obs: ObsSet) -> np.ndarray:
    """Stacked ``(1, 4T, H, W)`` input: masked y1, its mask, y2 and y3."""
    y1, y3 = obs[1], obs[3]
    y2 = obs.get(2)
    y2v = y2.values.astype64() if y2 is not None else np.zeros(y1.grid.shape)
    return np.concatenate([y1.values.astype64(), y1.mask.astype64(), y2v, y3.values.astype64()])[None]


def direct_forward_t(P: ParamStore, inputs: np.ndarray, n_t: int) -> Tensor:
    base = P["direct.enc.lin.w"].shape[0]
    cfg = direct_config(n_t, base)
    if inputs.shape[1] != cfg.c_in:
        raise StructuralError(f"direct inversion expects {cfg.c_in} channels, got {inputs.shape[1]}")
    return phi_apply_t(P, Tensor(inputs), cfg, prefix="direct")


def direct_inversion(P: ParamStore, obs: ObsSet) -> FieldStack:
    g = obs.grid
    with no_record():
        out = direct_forward_t(P, direct_inputs(obs), g.n_t)
    return FieldStack(g, out.data[0])
