"""Two-scale U-Net prior with bilinear blocks.

Time is folded into channels, so a state of ``T`` frames enters as
``2T`` channels.  Layout::

    enc   = block(x)                      # full resolution, C channels
    mid   = block(avgpool2(enc))          # half resolution, 2C channels
    dec   = block(concat[enc, up(mid)])   # full resolution, C channels
    Phi(x) = x + proj(dec)                # 1x1 projection, zero at init

with ``block(u) = conv_lin(u) + conv_a(u) * conv_b(u)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .fields import StateSeq
from .gradcore import ParamStore, Tensor, count_params, no_record, ops  # noqa: F401  (re-export)
from .layout import state_tensor, tensor_state


@dataclass(frozen=True)
class PhiConfig:
    n_t: int = 7
    base_channels: int = 16
    use_bilinear: bool = True
    kernel_size: int = 3
    in_channels: int | None = None
    out_channels: int | None = None
    skip: bool = True

    def __post_init__(self):
        if self.base_channels < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("base_channels must be >= 1 and kernel_size odd")
        if self.skip and self.c_in != self.c_out:
            raise ConfigError("identity skip needs equal input and output channels")

    @property
    def c_in(self) -> int:
        return self.in_channels or 2 * self.n_t

    @property
    def c_out(self) -> int:
        return self.out_channels or 2 * self.n_t

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _block_shapes(c_in: int, c_out: int, k: int, bilinear: bool) -> dict[str, tuple]:
    names = ("lin", "a", "b") if bilinear else ("lin",)
    shapes = {}
    for n in names:
        shapes[f"{n}.w"] = (c_out, c_in, k, k)
        shapes[f"{n}.b"] = (c_out,)
    return shapes


def _layout(cfg: PhiConfig) -> dict[str, tuple]:
    c, k, bl = cfg.base_channels, cfg.kernel_size, cfg.use_bilinear
    shapes = {}
    for block, (ci, co) in {
        "enc": (cfg.c_in, c),
        "mid": (c, 2 * c),
        "dec": (3 * c, c),
    }.items():
        for name, shp in _block_shapes(ci, co, k, bl).items():
            shapes[f"{block}.{name}"] = shp
    shapes["proj.w"] = (cfg.c_out, c, 1, 1)
    shapes["proj.b"] = (cfg.c_out,)
    return shapes


def phi_init(cfg: PhiConfig, seed: int, prefix: str = "phi") -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shp in _layout(cfg).items():
        if name.startswith("proj") or name.endswith(".b"):
            value = np.zeros(shp)
        else:
            fan_in = shp[1] * shp[2] * shp[3]
            gain = 1.0 if name.split(".")[1] == "lin" else 0.5
            value = gain * rng.standard_normal(shp) / np.sqrt(fan_in)
        store.add(f"{prefix}.{name}", value)
    return store


def _block(u: Tensor, P: ParamStore, pre: str, bilinear: bool) -> Tensor:
    out = ops.conv2d_bias(u, P[f"{pre}.lin.w"], P[f"{pre}.lin.b"])
    if bilinear:
        a = ops.conv2d_bias(u, P[f"{pre}.a.w"], P[f"{pre}.a.b"])
        b = ops.conv2d_bias(u, P[f"{pre}.b.w"], P[f"{pre}.b.b"])
        out = ops.add(out, ops.mul(a, b))
    return out


def phi_apply_t(P: ParamStore, x: Tensor, cfg: PhiConfig, prefix: str = "phi") -> Tensor:
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise StructuralError(f"prior needs even raster dims, got {h}x{w}")
    if x.shape[1] != cfg.c_in:
        raise StructuralError(f"prior expects {cfg.c_in} channels, got {x.shape[1]}")
    bl = cfg.use_bilinear
    enc = _block(x, P, f"{prefix}.enc", bl)
    mid = _block(ops.avgpool2(enc), P, f"{prefix}.mid", bl)
    dec = _block(ops.concat_channels([enc, ops.upsample_bilinear2(mid)]), P, f"{prefix}.dec", bl)
    out = ops.conv2d_bias(dec, P[f"{prefix}.proj.w"], P[f"{prefix}.proj.b"])
    return ops.add(x, out) if cfg.skip else out


def phi_residual_t(P: ParamStore, x: Tensor, cfg: PhiConfig, prefix: str = "phi") -> Tensor:
    return ops.sq_norm(ops.sub(x, phi_apply_t(P, x, cfg, prefix)))


def phi_apply(P: ParamStore, s: StateSeq, cfg: PhiConfig | None = None) -> StateSeq:
    cfg = cfg or PhiConfig(n_t=s.grid.n_t)
    with no_record():
        out = phi_apply_t(P, state_tensor(s), cfg)
    return tensor_state(out, s.grid)


def phi_residual(P: ParamStore, s: StateSeq, cfg: PhiConfig | None = None) -> float:
    cfg = cfg or PhiConfig(n_t=s.grid.n_t)
    with no_record():
        return float(phi_residual_t(P, state_tensor(s), cfg).data)
