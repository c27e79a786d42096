"""End-to-end supervised training of the solver, prior and observation operators.

The loss for one sample is

    w_x    * ||x_true - x_hat||^2
  + w_grad * ||grad x_true - grad x_hat||^2
  + w_phi  * (||s_true - Phi(s_true)||^2 + ||s_hat - Phi(s_hat)||^2)

where gradients are spatial and ``s_true = (x0.xbar, x_true - x0.xbar)`` is
the true field split on the same large-scale component as the initial state.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import direct_config, direct_forward_t, direct_init, direct_inputs
from .errors import ConfigError, DivergenceError
from .fields import FieldStack, StateSeq, difference_matrix
from .gradcore import ParamStore, Tape, Tensor, grad, no_record, ops, save_params
from .layout import ObsArrays, composite_t, state_tensor, tensor_state
from .metrics import mu_sigma
from .obsops import init_feature_pair
from .osse import TrainSample
from .priornet import PhiConfig, phi_init, phi_residual_t
from .solver import SolverConfig, lstm_init, solve_t
from .varcost import CostConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    w_x: float = 1.0
    w_grad: float = 10.0
    w_phi: float = 0.1

    def __post_init__(self):
        ws = (self.w_x, self.w_grad, self.w_phi)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigError("loss weights must be >= 0 with at least one positive")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_period: int = 25
    unroll: tuple[tuple[int, int], ...] = ((0, 5), (25, 10), (50, 15))
    batch_size: int = 4
    epochs: int = 75
    seed: int = 0
    patch: int | None = None
    threads: int = 1
    checkpoint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "unroll", tuple(tuple(int(v) for v in e) for e in self.unroll))
        if not self.unroll or self.unroll[0][0] != 0:
            raise ConfigError("unroll schedule must start at epoch 0")
        epochs = [e for e, _ in self.unroll]
        ks = [k for _, k in self.unroll]
        if epochs != sorted(epochs) or ks != sorted(ks):
            raise ConfigError("unroll schedule must be sorted with non-decreasing depth")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if self.patch is not None and (self.patch < 4 or self.patch % 2):
            raise ConfigError("patch must be an even size >= 4")

    def depth(self, epoch: int) -> int:
        k = self.unroll[0][1]
        for e, kk in self.unroll:
            if epoch >= e:
                k = kk
        return k

    def learning_rate(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_period)


# ---------------------------------------------------------------- samples

@dataclass
class Prepared:
    obs: ObsArrays
    x0: np.ndarray        # (1, 2T, H, W)
    truth: np.ndarray     # (1, T, H, W)
    s_true: np.ndarray    # (1, 2T, H, W)
    direct_in: np.ndarray | None

    @property
    def n_t(self) -> int:
        return self.truth.shape[1]

    def crop(self, y0: int, x0: int, size: int) -> "Prepared":
        sl = (Ellipsis, slice(y0, y0 + size), slice(x0, x0 + size))
        c = lambda a: None if a is None else np.ascontiguousarray(a[sl])  # noqa: E731
        return Prepared(self.obs.crop(y0, x0, size, size), c(self.x0), c(self.truth),
                        c(self.s_true), c(self.direct_in))


def prepare(sample: TrainSample, with_direct: bool = False) -> Prepared:
    x0 = state_tensor(sample.x0).data
    truth = sample.x_true.astype64()[None]
    xbar = sample.x0.xbar.astype64()[None]
    s_true = np.concatenate([xbar, truth - xbar], axis=1)
    d_in = direct_inputs(sample.obs) if with_direct else None
    return Prepared(ObsArrays(sample.obs), x0, truth, s_true, d_in)


# ---------------------------------------------------------------- losses

def _spatial_grad_t(e: Tensor, dx: float) -> tuple[Tensor, Tensor]:
    h, w = e.shape[-2:]
    return (ops.axis_linear(e, difference_matrix(w, dx), -1),
            ops.axis_linear(e, difference_matrix(h, dx), -2))


def loss_terms_t(x_hat: Tensor, s_hat: Tensor | None, truth: np.ndarray, s_true: np.ndarray | None,
                 P: ParamStore, phi_cfg: PhiConfig | None, w: LossWeights,
                 dx: float) -> dict[str, Tensor]:
    """Weighted loss parts.  ``x_hat`` is the composite; ``s_hat`` the two-scale state."""
    err = ops.sub(Tensor(truth), x_hat)
    parts = {}
    if w.w_x > 0:
        parts["x"] = ops.scale(ops.sq_norm(err), w.w_x)
    if w.w_grad > 0:
        gx, gy = _spatial_grad_t(err, dx)
        parts["grad"] = ops.scale(ops.add(ops.sq_norm(gx), ops.sq_norm(gy)), w.w_grad)
    if w.w_phi > 0 and s_hat is not None and phi_cfg is not None:
        reg = ops.add(phi_residual_t(P, Tensor(s_true), phi_cfg), phi_residual_t(P, s_hat, phi_cfg))
        parts["phi"] = ops.scale(reg, w.w_phi)
    return parts


def _sum(parts: dict[str, Tensor]) -> Tensor:
    vals = list(parts.values())
    out = vals[0]
    for v in vals[1:]:
        out = ops.add(out, v)
    return out


def loss_total(x_hat: StateSeq | FieldStack, x_true: FieldStack, P: ParamStore,
               weights: LossWeights, phi_cfg: PhiConfig | None = None,
               s_true: StateSeq | None = None) -> float:
    """Loss on field containers.  Prior terms need a state ``x_hat`` and ``s_true``."""
    g = x_true.grid
    with no_record():
        if isinstance(x_hat, StateSeq):
            s_hat = state_tensor(x_hat)
            comp = composite_t(s_hat, g.n_t)
        else:
            s_hat, comp = None, Tensor(x_hat.astype64()[None])
        st = None if s_true is None else state_tensor(s_true).data
        if st is None:
            s_hat = None
        cfg = phi_cfg or PhiConfig(n_t=g.n_t)
        return float(_sum(loss_terms_t(comp, s_hat, x_true.astype64()[None], st, P, cfg,
                                       weights, g.dx)).data)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; returns new parameter arrays and state (inputs untouched)."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------- models

PROJ_INIT = 1e-3


class VarNet:
    """Cost + prior + LSTM solver, trained end to end."""

    kind = "varnet"

    def __init__(self, cost: CostConfig, solver: SolverConfig):
        self.cost = cost
        self.solver = solver

    def init_params(self, seed: int) -> ParamStore:
        P = phi_init(self.cost.prior, seed)
        # with the identity skip, an exactly zero projection is a stationary
        # point of every loss (x - phi(x) and its x-gradient both vanish), so
        # the prior would never train; a tiny seeded projection breaks it
        rng = np.random.default_rng(seed + 307)
        w = P["phi.proj.w"].data
        P.assign({"phi.proj.w": PROJ_INIT * rng.standard_normal(w.shape) / np.sqrt(w.shape[1])})
        for i, spec in enumerate(self.cost.terms):
            if spec.kind == "FeaturePair":
                P.merge(init_feature_pair(spec, seed + 101 + i))
        P.merge(lstm_init(2 * self.cost.prior.n_t, self.solver, seed + 211))
        return P

    def forward(self, P: ParamStore, s: Prepared, K: int, create_graph: bool):
        res = solve_t(Tensor(s.x0), s.obs, P, self.cost, self.solver,
                      create_graph=create_graph, n_iters=K, trace=False)
        return composite_t(res.x, s.n_t), res.x

    def loss_parts(self, P, s: Prepared, K: int, w: LossWeights, create_graph: bool):
        comp, state = self.forward(P, s, K, create_graph)
        return loss_terms_t(comp, state, s.truth, s.s_true, P, self.cost.prior, w, s.obs.grid.dx)


class DirectUNet:
    """Single forward pass of the prior architecture over stacked observations."""

    kind = "direct"

    def __init__(self, n_t: int, base_channels: int = 16):
        self.n_t = n_t
        self.base_channels = base_channels

    def init_params(self, seed: int) -> ParamStore:
        return direct_init(self.n_t, seed, self.base_channels)

    def forward(self, P, s: Prepared, K: int, create_graph: bool):
        return direct_forward_t(P, s.direct_in, self.n_t), None

    def loss_parts(self, P, s: Prepared, K: int, w: LossWeights, create_graph: bool):
        comp, _ = self.forward(P, s, K, create_graph)
        return loss_terms_t(comp, None, s.truth, None, P, None, w, s.obs.grid.dx)


def sample_loss_and_grad(model, P: ParamStore, s: Prepared, K: int,
                         w: LossWeights) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for one sample, on its own tape."""
    with Tape():
        loss = _sum(model.loss_parts(P, s, K, w, create_graph=True))
        gs = grad(loss, P.tensors())
    return float(loss.data), {k: g.data for k, g in zip(P.names(), gs)}


def evaluate(model, P: ParamStore, samples: Sequence[Prepared], K: int,
             w: LossWeights) -> tuple[float, float, list[np.ndarray]]:
    """Mean loss, score of the stacked reconstructions, and the reconstructions."""
    losses, recs = [], []
    for s in samples:
        comp, state = model.forward(P, s, K, create_graph=False)
        with no_record():
            if state is None:
                parts = loss_terms_t(comp, None, s.truth, None, P, None, w, s.obs.grid.dx)
            else:
                parts = loss_terms_t(Tensor(comp.data), Tensor(state.data), s.truth, s.s_true,
                                     P, model.cost.prior, w, s.obs.grid.dx)
        losses.append(float(_sum(parts).data))
        recs.append(comp.data[0])
    if not samples:
        return float("nan"), float("nan"), []
    mu, _, _ = mu_sigma(np.concatenate(recs), np.concatenate([s.truth[0] for s in samples]))
    return float(np.mean(losses)), mu, recs


@dataclass
class TrainResult:
    params: ParamStore
    history: list[dict]
    best_epoch: int | None
    adam: AdamState


def _crop_batch(batch: list[Prepared], patch: int | None, rng: np.random.Generator) -> list[Prepared]:
    if patch is None:
        return batch
    out = []
    for s in batch:
        h, w = s.truth.shape[-2:]
        if patch >= min(h, w):
            out.append(s)
            continue
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        out.append(s.crop(y0, x0, patch))
    return out


def train_loop(model, train: Sequence[Prepared], val: Sequence[Prepared], cfg: TrainConfig,
               params: ParamStore | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam with step-decayed learning rate and scheduled unroll depth.

    The best-validation parameters are returned (the final ones when there is
    no validation set).  Deterministic for a fixed ``cfg.seed``.
    """
    P = params if params is not None else model.init_params(cfg.seed)
    adam = AdamState()
    history: list[dict] = []
    best = (math.inf, None, None)
    last_good = P.arrays()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            K, lr = cfg.depth(epoch), cfg.learning_rate(epoch)
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(train))
            losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                batch = _crop_batch([train[i] for i in order[b0:b0 + cfg.batch_size]], cfg.patch, rng)
                job = lambda s: sample_loss_and_grad(model, P, s, K, cfg.weights)  # noqa: E731
                results = list(pool.map(job, batch)) if pool else [job(s) for s in batch]
                total = {k: np.zeros_like(v) for k, v in P.arrays().items()}
                for loss, g in results:
                    losses.append(loss)
                    for k in total:
                        total[k] += g[k]
                if not all(math.isfinite(l) for l, _ in results) or not all(
                        np.all(np.isfinite(v)) for v in total.values()):
                    P.assign(last_good)
                    if cfg.checkpoint:
                        save_params(cfg.checkpoint, P, adam.as_dict(), {"epoch": epoch})
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}", iteration=epoch)
                last_good = P.arrays()
                new_p, adam = adam_step(last_good, total, adam, lr)
                P.assign(new_p)
            entry = {"epoch": epoch, "lr": lr, "K": K,
                     "train_loss": float(np.mean(losses)) if losses else float("nan")}
            if val:
                vl, vmu, _ = evaluate(model, P, val, K, cfg.weights)
                entry.update(val_loss=vl, val_mu=vmu)
                if vl < best[0]:
                    best = (vl, epoch, P.arrays())
                    if cfg.checkpoint:
                        save_params(cfg.checkpoint, P, adam.as_dict(), {"epoch": epoch, "K": K})
            history.append(entry)
            log.info("epoch %d K=%d lr=%.2e train=%.4g val=%s", epoch, K, lr,
                     entry["train_loss"], entry.get("val_loss"))
            if on_epoch:
                on_epoch(entry)
    finally:
        if pool:
            pool.shutdown()
    if best[2] is not None:
        P.assign(best[2])
    elif cfg.checkpoint and cfg.epochs > 0:
        save_params(cfg.checkpoint, P, adam.as_dict(), {"epoch": cfg.epochs - 1})
    return TrainResult(P, history, best[1], adam)
