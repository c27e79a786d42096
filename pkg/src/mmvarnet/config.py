"""Experiment configuration: one JSON document validated against a schema.

Every numeric default lives in ``SCHEMA``; :func:`load_config` fills the
missing keys and rejects unknown ones.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .baselines import OIConfig
from .errors import ConfigError
from .fields import GridSpec
from .obsops import ObsTermSpec
from .osse import MaskConfig, SplitConfig, SynthConfig
from .priornet import PhiConfig
from .solver import SolverConfig
from .train import LossWeights, TrainConfig
from .varcost import CostConfig


def _obj(props: dict, **extra) -> dict:
    return {"type": "object", "additionalProperties": False, "default": {}, "properties": props, **extra}


def _num(default, minimum=None, exclusive=False, kind="number"):
    s = {"type": kind, "default": default}
    if minimum is not None:
        s["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return s


def _pair(default, kind="number"):
    return {"type": "array", "items": {"type": kind}, "minItems": 2, "maxItems": 2, "default": default}


_TERM = {
    "type": "object", "additionalProperties": False,
    "required": ["modality", "kind", "weight"],
    "properties": {
        "modality": {"type": "integer", "minimum": 1},
        "index": {"type": "integer", "minimum": 1, "default": 1},
        "kind": {"enum": ["MaskedIdentity", "LargeScale", "FeaturePair", "Advection"]},
        "weight": {"type": "number", "minimum": 0},
        "channels": {"type": "integer", "minimum": 1, "default": 8},
        "kernel_size": {"type": "integer", "minimum": 1, "default": 3},
        "velocity_scale": {"type": "number", "default": 1.0},
    },
}

SCHEMA = _obj({
    "seed": _num(0, 0, kind="integer"),
    "osse": _obj({
        "grid": _obj({
            "n_t": _num(60, 1, kind="integer"), "n_y": _num(64, 4, kind="integer"),
            "n_x": _num(64, 4, kind="integer"), "dx": _num(0.05, 0, True), "dt": _num(1.0, 0, True),
        }),
        "slope": _num(4.0, 0, True),
        "wavelength": _num(16.0, 0, True),
        "advection": _pair([0.5, 0.25]),
        "phase_diffusion": _num(0.15, 0),
        "amplitude": _num(1.0, 0, True),
        "sigma_obs": _num(0.02, 0),
        "sigma_sst": _num(0.01, 0),
        "masks": _obj({
            "n_nadir_tracks": _num(1, 0, kind="integer"),
            "track_width": _num(1.0, 0, True),
            "swath_width": _num(3.0, 0),
            "swath_gap": _num(1.0, 0),
            "swath_speed": _num(11.0),
            "swath_angle": _num(80.0),
            "track_angle_range": _pair([20.0, 160.0]),
            "target_coverage": _num(0.05, 0, True),
        }),
        "window": _num(7, 1, kind="integer"),
        "stride": _num(1, 1, kind="integer"),
        "split": _obj({"test": _pair([0, 21], "integer"), "val": _pair([21, 28], "integer")}),
    }),
    "cost": _obj({
        "use_sst": {"type": "boolean", "default": True},
        "use_advection": {"type": "boolean", "default": False},
        "terms": {"type": ["array", "null"], "items": _TERM, "default": None},
        "gamma": _num(1.0, 0),
        "prior": _obj({
            "base_channels": _num(16, 1, kind="integer"),
            "use_bilinear": {"type": "boolean", "default": True},
            "kernel_size": _num(3, 1, kind="integer"),
        }),
    }),
    "solver": _obj({
        "mode": {"enum": ["lstm", "gd"], "default": "lstm"},
        "n_iters": _num(5, 0, kind="integer"),
        "step": _num(0.1, 0, True),
        "hidden_channels": _num(16, 1, kind="integer"),
        "kernel_size": _num(3, 1, kind="integer"),
        "grad_normalization": {"enum": ["per-field-rms", "none"], "default": "per-field-rms"},
    }),
    "train": _obj({
        "w_x": _num(1.0, 0), "w_grad": _num(10.0, 0), "w_phi": _num(0.1, 0),
        "lr": _num(3e-3, 0, True),
        "lr_decay": _num(0.5, 0, True),
        "lr_period": _num(15, 1, kind="integer"),
        "unroll": {"type": "array", "minItems": 1, "items": _pair(None, "integer"),
                   "default": [[0, 5], [15, 8]]},
        "batch_size": _num(4, 1, kind="integer"),
        "epochs": _num(30, 0, kind="integer"),
        "direct_epochs": _num(60, 0, kind="integer"),
        "patch": {"type": ["integer", "null"], "minimum": 4, "default": 32},
    }),
    "oi": _obj({
        "length_x": _num(0.15, 0, True),
        "length_t": _num(5.0, 0, True),
        "noise_var": _num(0.1, 0),
        "signal_var": _num(1.0, 0, True),
        "max_obs": _num(1500, 1, kind="integer"),
        "thinning": _num(1, 1, kind="integer"),
    }),
    "metrics": _obj({"nsr_threshold": _num(0.5, 0, True)}),
    "paths": _obj({"out_dir": {"type": "string", "default": "run"}}),
})


def _with_defaults(validator_class):
    """Validator that fills ``default`` values of object properties while validating."""
    validate_props = validator_class.VALIDATORS["properties"]

    def set_defaults(validator, properties, instance, schema):
        if isinstance(instance, dict):
            for name, sub in properties.items():
                if "default" in sub and name not in instance:
                    instance[name] = copy.deepcopy(sub["default"])
        yield from validate_props(validator, properties, instance, schema)

    return jsonschema.validators.extend(validator_class, {"properties": set_defaults})


_Validator = _with_defaults(jsonschema.Draft202012Validator)


def validate(doc: dict) -> dict:
    """Return a defaults-filled copy of ``doc``; raises ConfigError on any violation."""
    out = copy.deepcopy(doc)
    errors = sorted(_Validator(SCHEMA).iter_errors(out), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")
    if out["osse"]["window"] > out["osse"]["grid"]["n_t"]:
        raise ConfigError("config error at osse/window: longer than the record")
    return out


def default_config() -> dict:
    return validate({})


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return validate(doc)


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps(cfg).encode()).hexdigest()


@dataclass(frozen=True)
class Experiment:
    """Typed view of a validated config document."""

    raw: dict
    seed: int
    synth: SynthConfig
    masks: MaskConfig
    split: SplitConfig
    window: int
    stride: int
    cost: CostConfig
    cost_ssh_only: CostConfig
    solver: SolverConfig
    train: TrainConfig
    direct_epochs: int
    oi: OIConfig
    nsr_threshold: float
    out_dir: str


def _terms(c: dict, use_sst: bool) -> tuple[ObsTermSpec, ...]:
    if c["terms"] is not None:
        terms = [ObsTermSpec(**t) for t in c["terms"]]
        if not use_sst:
            terms = [t for t in terms if t.modality != 3]
        return tuple(terms)
    from .obsops import default_terms
    return tuple(default_terms(use_sst, c["use_advection"] and use_sst))


def build(cfg: dict) -> Experiment:
    o, c, s, t = cfg["osse"], cfg["cost"], cfg["solver"], cfg["train"]
    try:
        grid = GridSpec(**o["grid"])
        synth = SynthConfig(grid=grid, slope=o["slope"], wavelength=o["wavelength"],
                            advection=tuple(o["advection"]), phase_diffusion=o["phase_diffusion"],
                            amplitude=o["amplitude"], sigma_obs=o["sigma_obs"],
                            sigma_sst=o["sigma_sst"], seed=cfg["seed"])
        masks = MaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in o["masks"].items()})
        split = SplitConfig(tuple(o["split"]["test"]), tuple(o["split"]["val"]))
        prior = PhiConfig(n_t=o["window"], **c["prior"])
        cost = CostConfig(_terms(c, c["use_sst"]), c["gamma"], prior)
        cost_ssh = CostConfig(_terms(c, False), c["gamma"], prior)
        solver = SolverConfig(**s)
        train = TrainConfig(
            weights=LossWeights(t["w_x"], t["w_grad"], t["w_phi"]), lr=t["lr"],
            lr_decay=t["lr_decay"], lr_period=t["lr_period"],
            unroll=tuple(tuple(e) for e in t["unroll"]), batch_size=t["batch_size"],
            epochs=t["epochs"], seed=cfg["seed"], patch=t["patch"])
        oi = OIConfig(**cfg["oi"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return Experiment(cfg, cfg["seed"], synth, masks, split, o["window"], o["stride"], cost,
                      cost_ssh, solver, train, t["direct_epochs"], oi,
                      cfg["metrics"]["nsr_threshold"], cfg["paths"]["out_dir"])
