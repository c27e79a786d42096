"""Observation terms of the variational cost.

Four residual kinds are supported:

* ``MaskedIdentity``  -- mask * (y - xbar - dx), for along-track/swath SSH
* ``LargeScale``      -- mask * (y - xbar), for a gap-free interpolated SSH product
* ``FeaturePair``     -- conv(y; K1) - conv(xbar + dx; K2), one channel per feature
* ``Advection``       -- dy/dt - <grad y, V(x)>, with V the geostrophic velocity

The ``*_t`` functions work on engine tensors and are what the cost uses;
the plain-named functions wrap them for field containers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError, UnsupportedShapeError
from .fields import (
    FieldStack,
    ObsModality,
    StateSeq,
    difference_matrix,
    forward_difference_matrix,
)
from .gradcore import ParamStore, Tensor, no_record, ops
from .layout import composite_t, field_tensor, state_tensor, tensor_field, xbar_of

KINDS = ("MaskedIdentity", "LargeScale", "FeaturePair", "Advection")


@dataclass(frozen=True)
class ObsTermSpec:
    modality: int
    index: int = 1
    kind: str = "MaskedIdentity"
    weight: float = 1.0
    params: str | None = None
    channels: int = 8
    kernel_size: int = 3
    velocity_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown observation term kind {self.kind!r}")
        if not self.weight >= 0:
            raise ConfigError(f"term weight must be >= 0, got {self.weight}")
        if self.kind == "FeaturePair":
            if self.channels < 1 or self.kernel_size % 2 == 0:
                raise ConfigError("FeaturePair needs channels >= 1 and an odd kernel size")
            if self.params is None:
                object.__setattr__(self, "params", f"obs.g{self.modality}{self.index}")

    @property
    def term_id(self) -> str:
        return f"G{self.modality},{self.index}"

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def init_feature_pair(spec: ObsTermSpec, seed: int, scale: float = 0.1) -> ParamStore:
    """Two kernels ``(C, 1, k, k)`` with small seeded random entries."""
    rng = np.random.default_rng(seed)
    c, k = spec.channels, spec.kernel_size
    store = ParamStore()
    for name in ("k1", "k2"):
        w = scale * rng.standard_normal((c, 1, k, k)) / k
        store.add(f"{spec.params}.{name}", w)
    return store


def _frames_as_batch(f: Tensor) -> Tensor:
    _, t, h, w = f.shape
    return ops.reshape(f, (t, 1, h, w))


# ---------------------------------------------------------------- tensor level

def masked_identity_residual_t(values: np.ndarray, mask: np.ndarray, x: Tensor) -> Tensor:
    n_t = values.shape[1]
    r = ops.sub(Tensor(values), composite_t(x, n_t))
    return ops.mul(Tensor(mask), r)


def largescale_residual_t(values: np.ndarray, mask: np.ndarray, x: Tensor) -> Tensor:
    n_t = values.shape[1]
    r = ops.sub(Tensor(values), xbar_of(x, n_t))
    return ops.mul(Tensor(mask), r)


def feature_pair_residual_t(values: np.ndarray, x: Tensor, k1: Tensor, k2: Tensor) -> Tensor:
    """``(T, C, H, W)`` residual conv(y; K1) - conv(composite; K2) per frame."""
    if k1.data.ndim != 4 or k1.shape != k2.shape or k1.shape[1] != 1:
        raise StructuralError(f"feature kernels must share shape (C,1,k,k): {k1.shape}, {k2.shape}")
    n_t = values.shape[1]
    obs_feat = ops.conv2d(_frames_as_batch(Tensor(values)), k1)
    state_feat = ops.conv2d(_frames_as_batch(composite_t(x, n_t)), k2)
    return ops.sub(obs_feat, state_feat)


def geostrophic_velocity_t(eta: Tensor, dx: float, c_g: float = 1.0) -> tuple[Tensor, Tensor]:
    """u = -c_g d(eta)/dy, v = c_g d(eta)/dx on a ``(1, T, H, W)`` tensor."""
    h, w = eta.shape[-2:]
    detady = ops.axis_linear(eta, difference_matrix(h, dx), -2)
    detadx = ops.axis_linear(eta, difference_matrix(w, dx), -1)
    return ops.scale(detady, -c_g), ops.scale(detadx, c_g)


def advection_residual_t(values: np.ndarray, x: Tensor, dx: float, dt: float,
                         c_g: float = 1.0) -> Tensor:
    n_t = values.shape[1]
    if n_t < 2:
        raise UnsupportedShapeError("advection residual needs at least two frames")
    h, w = values.shape[-2:]
    dydt = np.moveaxis(np.tensordot(forward_difference_matrix(n_t, dt), values, axes=(1, 1)), 0, 1)
    gx = values @ difference_matrix(w, dx).T
    gy = np.swapaxes(np.swapaxes(values, -1, -2) @ difference_matrix(h, dx).T, -1, -2)
    u, v = geostrophic_velocity_t(composite_t(x, n_t), dx, c_g)
    transport = ops.add(ops.mul(Tensor(gx), u), ops.mul(Tensor(gy), v))
    return ops.sub(Tensor(dydt), transport)


def term_residual_t(spec: ObsTermSpec, values: np.ndarray, mask: np.ndarray, x: Tensor,
                    params: ParamStore | None, dx: float, dt: float) -> Tensor:
    if spec.kind == "MaskedIdentity":
        return masked_identity_residual_t(values, mask, x)
    if spec.kind == "LargeScale":
        return largescale_residual_t(values, mask, x)
    if spec.kind == "FeaturePair":
        if params is None or f"{spec.params}.k1" not in params or f"{spec.params}.k2" not in params:
            raise ConfigError(f"missing feature kernels {spec.params}.k1/.k2")
        k1, k2 = params[f"{spec.params}.k1"], params[f"{spec.params}.k2"]
        if k1.shape != (spec.channels, 1, spec.kernel_size, spec.kernel_size):
            raise StructuralError(f"{spec.params}.k1 has shape {k1.shape}")
        return feature_pair_residual_t(values, x, k1, k2)
    return advection_residual_t(values, x, dx, dt, spec.velocity_scale)


# ---------------------------------------------------------------- field level

def _check_grids(a, b):
    if a.grid != b.grid:
        raise StructuralError(f"grid mismatch: {a.grid} vs {b.grid}")


def masked_identity_residual(y1: ObsModality, s: StateSeq) -> FieldStack:
    _check_grids(y1, s)
    with no_record():
        r = masked_identity_residual_t(y1.values.astype64()[None], y1.mask.astype64()[None],
                                       state_tensor(s))
    return tensor_field(r, s.grid)


def largescale_residual(y2: ObsModality, s: StateSeq) -> FieldStack:
    _check_grids(y2, s)
    with no_record():
        r = largescale_residual_t(y2.values.astype64()[None], y2.mask.astype64()[None],
                                  state_tensor(s))
    return tensor_field(r, s.grid)


def feature_pair_residual(y3: ObsModality, s: StateSeq, params: ParamStore,
                          spec: ObsTermSpec) -> np.ndarray:
    """Residual as a ``(C, T, H, W)`` float64 array (one stack per feature)."""
    _check_grids(y3, s)
    with no_record():
        r = term_residual_t(spec, y3.values.astype64()[None], y3.mask.astype64()[None],
                            state_tensor(s), params, s.grid.dx, s.grid.dt)
    return np.ascontiguousarray(r.data.transpose(1, 0, 2, 3))


def features(y3: ObsModality, params: ParamStore, spec: ObsTermSpec) -> np.ndarray:
    """Learned observation-side feature maps conv(y; K1) as ``(C, T, H, W)``."""
    with no_record():
        f = ops.conv2d(_frames_as_batch(field_tensor(y3.values)), params[f"{spec.params}.k1"])
    return np.ascontiguousarray(f.data.transpose(1, 0, 2, 3))


def geostrophic_velocity(s: StateSeq, c_g: float = 1.0) -> tuple[FieldStack, FieldStack]:
    with no_record():
        u, v = geostrophic_velocity_t(composite_t(state_tensor(s), s.grid.n_t), s.grid.dx, c_g)
    return tensor_field(u, s.grid), tensor_field(v, s.grid)


def advection_residual(y: ObsModality, s: StateSeq, c_g: float = 1.0) -> FieldStack:
    _check_grids(y, s)
    with no_record():
        r = advection_residual_t(y.values.astype64()[None], state_tensor(s), s.grid.dx,
                                 s.grid.dt, c_g)
    return tensor_field(r, s.grid)


def default_terms(use_sst: bool = True, use_advection: bool = False) -> list[ObsTermSpec]:
    terms = [
        ObsTermSpec(1, 1, "MaskedIdentity", 50.0),
        ObsTermSpec(2, 1, "LargeScale", 1.0),
    ]
    if use_sst:
        terms.append(ObsTermSpec(3, 1, "FeaturePair", 10.0, channels=8))
    if use_advection:
        terms.append(ObsTermSpec(3, 2, "Advection", 1.0))
    return terms
