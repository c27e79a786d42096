"""Iterative minimisation of the variational cost.

Two modes share one loop:

* ``gd``   -- x <- x - step * dU/dx
* ``lstm`` -- a convolutional LSTM reads the (normalised) gradient and a
  1x1 linear map turns its hidden state into the state increment.

In ``lstm`` mode with ``create_graph=True`` (inside a tape) the whole
unrolled computation is differentiable w.r.t. every parameter.
"""
from __future__ import annotations

import csv
import math
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, StructuralError
from .fields import ObsSet, StateSeq
from .gradcore import ParamStore, Tensor, no_record, ops
from .layout import ObsArrays, state_tensor, tensor_state
from .varcost import CostConfig, cost_grad_t, cost_t, cost_terms_t

MODES = ("gd", "lstm")
NORMALIZATIONS = ("none", "per-field-rms")


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "lstm"
    n_iters: int = 5
    step: float = 0.1
    hidden_channels: int = 16
    kernel_size: int = 3
    grad_normalization: str = "per-field-rms"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"solver mode must be one of {MODES}")
        if self.grad_normalization not in NORMALIZATIONS:
            raise ConfigError(f"grad_normalization must be one of {NORMALIZATIONS}")
        if self.n_iters < 0:
            raise ConfigError("n_iters must be >= 0")
        if self.mode == "gd" and not self.step > 0:
            raise ConfigError("gd step must be > 0")
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SolverState:
    x: Tensor
    h: Tensor | None = None
    c: Tensor | None = None


@dataclass
class SolveResult:
    x: Tensor
    costs: list[float] = field(default_factory=list)
    terms: list[dict[str, float]] = field(default_factory=list)

    def state(self, grid) -> StateSeq:
        return tensor_state(self.x, grid)

    def write_trace(self, path) -> None:
        keys = sorted({k for t in self.terms for k in t})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "U", *keys])
            for k, u in enumerate(self.costs):
                row = self.terms[k] if k < len(self.terms) else {}
                w.writerow([k, repr(u), *(repr(row.get(n, float("nan"))) for n in keys)])


def lstm_init(n_state: int, cfg: SolverConfig, seed: int, prefix: str = "solver") -> ParamStore:
    """Gate convolution weights (seeded) and a zero-initialised 1x1 output map."""
    rng = np.random.default_rng(seed)
    ch, k = cfg.hidden_channels, cfg.kernel_size
    c_in = n_state + ch
    store = ParamStore()
    store.add(f"{prefix}.gates.w", rng.standard_normal((4 * ch, c_in, k, k)) / np.sqrt(c_in * k * k))
    store.add(f"{prefix}.gates.b", np.zeros(4 * ch))
    store.add(f"{prefix}.L.w", np.zeros((n_state, ch, 1, 1)))
    store.add(f"{prefix}.L.b", np.zeros(n_state))
    return store


def lstm_step_t(g: Tensor, h: Tensor, c: Tensor, P: ParamStore,
                prefix: str = "solver") -> tuple[Tensor, Tensor, Tensor]:
    """One convolutional LSTM update; returns (output, h', c') with output = h'."""
    w, b = P[f"{prefix}.gates.w"], P[f"{prefix}.gates.b"]
    ch = h.shape[1]
    if w.shape[0] != 4 * ch or w.shape[1] != g.shape[1] + ch or c.shape != h.shape:
        raise StructuralError(
            f"lstm shapes: gates {w.shape}, input {g.shape}, hidden {h.shape}, cell {c.shape}")
    z = ops.conv2d_bias(ops.concat_channels([g, h]), w, b)
    i = ops.sigmoid(ops.slice_axis(z, 1, 0, ch))
    f = ops.sigmoid(ops.slice_axis(z, 1, ch, 2 * ch))
    o = ops.sigmoid(ops.slice_axis(z, 1, 2 * ch, 3 * ch))
    cand = ops.tanh(ops.slice_axis(z, 1, 3 * ch, 4 * ch))
    c_new = ops.add(ops.mul(f, c), ops.mul(i, cand))
    h_new = ops.mul(o, ops.tanh(c_new))
    return h_new, h_new, c_new


def normalize_gradient(g: Tensor, n_t: int, eps: float = 1e-12) -> Tensor:
    """Divide each state component's gradient by its RMS."""
    parts = []
    for lo in (0, n_t):
        p = ops.slice_axis(g, 1, lo, lo + n_t)
        ms = ops.add(ops.scale(ops.sq_norm(p), 1.0 / p.size), Tensor(np.array(eps)))
        parts.append(ops.smul(ops.power(ms, -0.5), p))
    return ops.concat_channels(parts)


def gd_step(x, g, step: float):
    """``x - step * g`` for tensors, arrays or scalars."""
    if isinstance(x, Tensor):
        return ops.sub(x, ops.scale(g, step))
    return x - step * g


def _check_finite(u: Tensor, k: int) -> float:
    val = float(u.data)
    if not math.isfinite(val):
        raise DivergenceError(f"non-finite cost at iteration {k}", iteration=k)
    return val


def solve_t(x0: Tensor, obs: ObsArrays, P: ParamStore, cost_cfg: CostConfig,
            cfg: SolverConfig, create_graph: bool = False, n_iters: int | None = None,
            trace: bool = True, trace_terms: bool = False, prefix: str = "solver") -> SolveResult:
    K = cfg.n_iters if n_iters is None else n_iters
    n_t = x0.shape[1] // 2
    x = x0
    hc = None
    result = SolveResult(x=x0)
    for k in range(K):
        u, g = cost_grad_t(x, obs, P, cost_cfg, create_graph=create_graph)
        val = _check_finite(u, k)
        if trace:
            result.costs.append(val)
        if trace_terms:
            with no_record():
                result.terms.append({n: float(v.data) for n, v in cost_terms_t(x, obs, P, cost_cfg).items()})
        ctx = nullcontext() if create_graph else no_record()
        with ctx:
            if cfg.mode == "gd":
                x = gd_step(x, g, cfg.step)
                continue
            if hc is None:
                zeros = Tensor(np.zeros((x.shape[0], cfg.hidden_channels) + x.shape[2:]))
                hc = (zeros, zeros)
            gin = normalize_gradient(g, n_t) if cfg.grad_normalization == "per-field-rms" else g
            out, h, c = lstm_step_t(gin, hc[0], hc[1], P, prefix)
            hc = (h, c)
            dxk = ops.conv2d_bias(out, P[f"{prefix}.L.w"], P[f"{prefix}.L.b"])
            x = ops.sub(x, dxk)
    if trace:
        with no_record():
            u = cost_t(Tensor(x.data), obs, P, cost_cfg)
        result.costs.append(_check_finite(u, K))
        if trace_terms:
            with no_record():
                result.terms.append({n: float(v.data) for n, v in cost_terms_t(Tensor(x.data), obs, P, cost_cfg).items()})
    result.x = x
    return result


def solve(x0: StateSeq, obs: ObsSet, P: ParamStore, cost_cfg: CostConfig,
          cfg: SolverConfig, trace_terms: bool = False) -> tuple[StateSeq, SolveResult]:
    """Run the solver on field containers; returns (x_hat, trace)."""
    arrays = obs if isinstance(obs, ObsArrays) else ObsArrays(obs)
    res = solve_t(state_tensor(x0), arrays, P, cost_cfg, cfg, trace_terms=trace_terms)
    return tensor_state(res.x, x0.grid), res
