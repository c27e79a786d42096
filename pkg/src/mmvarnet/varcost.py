"""The variational cost: weighted observation terms plus the prior penalty.

    U(x, {y}) = sum_terms weight * ||G(y, x)||^2 + gamma * ||x - Phi(x)||^2

Norms are plain sums of squares with no area or frame normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .fields import ObsSet, StateSeq
from .gradcore import ParamStore, Tape, Tensor, grad, no_record, ops
from .layout import ObsArrays, state_tensor, tensor_state
from .obsops import ObsTermSpec, default_terms, term_residual_t
from .priornet import PhiConfig, phi_residual_t

PRIOR_ID = "prior"


@dataclass(frozen=True)
class CostConfig:
    terms: tuple[ObsTermSpec, ...] = field(default_factory=lambda: tuple(default_terms()))
    gamma: float = 1.0
    prior: PhiConfig = field(default_factory=PhiConfig)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not (self.gamma > 0 or any(t.weight > 0 for t in self.terms)):
            raise ConfigError("cost needs a positive term weight or gamma > 0")
        ids = [t.term_id for t in self.terms]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate observation terms: {ids}")

    def modalities(self) -> set[int]:
        return {t.modality for t in self.terms}


def _check_modalities(obs: ObsArrays, cfg: CostConfig) -> None:
    missing = sorted(m for m in cfg.modalities() if m not in obs)
    if missing:
        raise ConfigError(f"cost references missing modalities {missing}")


def cost_terms_t(x: Tensor, obs: ObsArrays, P: ParamStore, cfg: CostConfig) -> dict[str, Tensor]:
    """Weighted term values, keyed by term id (plus ``prior``)."""
    _check_modalities(obs, cfg)
    g = obs.grid
    parts: dict[str, Tensor] = {}
    for spec in cfg.terms:
        if spec.weight == 0:
            continue
        m = obs[spec.modality]
        r = term_residual_t(spec, m.values, m.mask, x, P, g.dx, g.dt)
        parts[spec.term_id] = ops.scale(ops.sq_norm(r), spec.weight)
    if cfg.gamma > 0:
        parts[PRIOR_ID] = ops.scale(phi_residual_t(P, x, cfg.prior), cfg.gamma)
    return parts


def cost_t(x: Tensor, obs: ObsArrays, P: ParamStore, cfg: CostConfig) -> Tensor:
    parts = list(cost_terms_t(x, obs, P, cfg).values())
    total = parts[0]
    for p in parts[1:]:
        total = ops.add(total, p)
    return total


def cost_grad_t(x: Tensor, obs: ObsArrays, P: ParamStore, cfg: CostConfig,
                create_graph: bool = False) -> tuple[Tensor, Tensor]:
    """(U, dU/dx).  With ``create_graph`` the gradient stays differentiable."""
    if create_graph:
        if not x.requires_grad:
            x = Tensor(x.data, requires_grad=True)
        u = cost_t(x, obs, P, cfg)
        (gx,) = grad(u, [x], create_graph=True)
        return u, gx
    leaf = Tensor(x.data, requires_grad=True)
    with Tape():
        u = cost_t(leaf, obs, P, cfg)
        (gx,) = grad(u, [leaf])
    return Tensor(u.data), Tensor(gx.data)


def _arrays(obs) -> ObsArrays:
    return obs if isinstance(obs, ObsArrays) else ObsArrays(obs)


def cost_eval(s: StateSeq, obs: ObsSet, P: ParamStore, cfg: CostConfig) -> float:
    with no_record():
        return float(cost_t(state_tensor(s), _arrays(obs), P, cfg).data)


def cost_grad(s: StateSeq, obs: ObsSet, P: ParamStore, cfg: CostConfig) -> StateSeq:
    """Gradient w.r.t. both state components (float32 containers)."""
    _, g = cost_grad_t(state_tensor(s), _arrays(obs), P, cfg)
    return tensor_state(g, s.grid)


def cost_grad_array(s: StateSeq, obs: ObsSet, P: ParamStore, cfg: CostConfig):
    """Float64 gradient as a ``(2T, H, W)`` array."""
    _, g = cost_grad_t(state_tensor(s), _arrays(obs), P, cfg)
    return g.data[0]


def term_breakdown(s: StateSeq, obs: ObsSet, P: ParamStore, cfg: CostConfig) -> dict[str, float]:
    with no_record():
        parts = cost_terms_t(state_tensor(s), _arrays(obs), P, cfg)
    return {k: float(v.data) for k, v in parts.items()}
