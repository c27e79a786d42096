"""Experiment stages on disk: generate, OI baseline, train, reconstruct, evaluate.

Every stage writes ``manifest_<stage>.json`` with the config hash, seed and
sha256 of its inputs and outputs.  Inputs produced by an upstream stage are
checked against that stage's manifest before use.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import optimal_interp
from .config import Experiment, config_hash, dumps
from .errors import DataError
from .fields import FieldStack, read_fstk, write_fstk
from .gradcore import load_params, save_params
from .metrics import ScoreReport, nsr_curve, score
from .obsops import features as feature_maps
from .osse import Dataset, daily_masks, derive_sst, make_dataset, synth_truth, window_starts
from .train import DirectUNet, TrainConfig, VarNet, evaluate, prepare, train_loop

log = logging.getLogger(__name__)

MODELS = ("varnet_sst", "varnet_ssh", "direct")
METHODS = ("oi", "direct", "varnet_ssh", "varnet_sst")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    exp: Experiment
    out: Path

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        """Path of an upstream artifact, verified against the manifest that produced it."""
        p = self.path(name)
        if not p.exists():
            raise DataError(f"missing upstream artifact {p}")
        for m in sorted(self.out.glob("manifest_*.json")):
            outputs = json.loads(m.read_text()).get("outputs", {})
            if name in outputs and outputs[name] != sha256(p):
                raise DataError(f"hash mismatch for {p} (recorded in {m.name})")
        return p

    def manifest(self, stage: str, inputs: list[str], outputs: list[str], extra: dict | None = None):
        doc = {
            "stage": stage,
            "config_sha256": config_hash(self.exp.raw),
            "seed": self.exp.seed,
            "inputs": {n: sha256(self.path(n)) for n in inputs},
            "outputs": {n: sha256(self.path(n)) for n in outputs},
        }
        doc.update(extra or {})
        _atomic_text(self.path(f"manifest_{stage}.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def open_run(exp: Experiment, out_dir: str | None = None) -> Run:
    out = Path(out_dir or exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "config.json", dumps(exp.raw))
    return Run(exp, out)


# ---------------------------------------------------------------- stages

def generate(run: Run) -> dict:
    e = run.exp
    truth = synth_truth(e.synth)
    sst = derive_sst(truth, e.synth.sigma_sst, seed=e.seed + 1)
    masks = daily_masks(e.masks, e.synth.grid, seed=e.seed + 2)
    write_fstk(run.path("osse.fstk"), {"ssh": truth, "sst": sst, "mask": masks})
    split = window_starts(e.synth.grid.n_t, e.window, e.stride, e.split)
    return run.manifest("generate", [], ["osse.fstk"], {"windows": split})


def load_osse(run: Run) -> dict[str, FieldStack]:
    return read_fstk(run.require("osse.fstk"))


def _oi_key(start: int) -> str:
    return f"w{start:04d}"


def build_dataset(run: Run, with_oi: bool = True) -> Dataset:
    """Windows over the generated record; y2 comes from the ``baseline-oi`` products."""
    e = run.exp
    osse = load_osse(run)
    products = None
    if with_oi:
        stacks = read_fstk(run.require("oi.fstk"))
        products = {int(k[1:]): v for k, v in stacks.items()}
    return make_dataset(osse["ssh"], osse["sst"], osse["mask"], window=e.window, stride=e.stride,
                        sigma_obs=e.synth.sigma_obs, split=e.split, seed=e.seed,
                        oi_products=products)


def _concat(stacks: list[FieldStack]) -> FieldStack:
    g = stacks[0].grid
    data = np.concatenate([s.data for s in stacks])
    return FieldStack(g.with_frames(data.shape[0]), data)


def test_truth(ds: Dataset) -> FieldStack:
    if not ds.test:
        raise DataError("the test block holds no complete window")
    return _concat([s.x_true for s in ds.test])


def baseline_oi(run: Run) -> dict:
    """OI of y1 for every window (the y2 modality) and the OI test-block reconstruction."""
    ds = build_dataset(run, with_oi=False)
    products = {}
    for part in (ds.train, ds.val, ds.test):
        for s in part:
            products[_oi_key(s.start)] = optimal_interp(s.obs[1], run.exp.oi)
    write_fstk(run.path("oi.fstk"), dict(sorted(products.items())))
    oi = _concat([products[_oi_key(s.start)] for s in ds.test])
    write_fstk(run.path("recon_oi.fstk"), {"ssh": oi, "truth": test_truth(ds)})
    return run.manifest("baseline-oi", ["osse.fstk"], ["oi.fstk", "recon_oi.fstk"])


def model_for(run: Run, name: str):
    e = run.exp
    if name == "varnet_sst":
        return VarNet(e.cost, e.solver)
    if name == "varnet_ssh":
        return VarNet(e.cost_ssh_only, e.solver)
    if name == "direct":
        return DirectUNet(e.window, e.cost.prior.base_channels)
    raise DataError(f"unknown model {name!r}")


def _train_cfg(run: Run, name: str, threads: int) -> TrainConfig:
    t = run.exp.train
    kw = dict(t.__dict__, threads=threads, checkpoint=str(run.path(f"ckpt_{name}.pstk")))
    if name == "direct":
        kw.update(epochs=run.exp.direct_epochs)
    return TrainConfig(**kw)


def _write_history(path: Path, history: list[dict]) -> None:
    keys = ["epoch", "lr", "K", "train_loss", "val_loss", "val_mu"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for h in history:
            w.writerow([repr(float(h[k])) if isinstance(h.get(k), float) else h.get(k, "") for k in keys])


def train(run: Run, models: tuple[str, ...] = MODELS, threads: int = 1,
          ds: Dataset | None = None) -> dict:
    ds = ds or build_dataset(run)
    outputs = []
    for name in models:
        model = model_for(run, name)
        direct = model.kind == "direct"
        tr = [prepare(s, direct) for s in ds.train]
        va = [prepare(s, direct) for s in ds.val]
        cfg = _train_cfg(run, name, threads)
        log.info("training %s: %d train / %d val windows, %d epochs", name, len(tr), len(va), cfg.epochs)
        res = train_loop(model, tr, va, cfg)
        hist = run.path(f"history_{name}.csv")
        _write_history(hist, res.history)
        K = cfg.depth(max(cfg.epochs - 1, 0))
        save_params(run.path(f"model_{name}.pstk"), res.params, res.adam.as_dict(),
                    {"model": name, "best_epoch": res.best_epoch, "K": K})
        outputs += [f"model_{name}.pstk", f"history_{name}.csv"]
    return run.manifest("train", ["osse.fstk", "oi.fstk"], outputs)


def load_model(run: Run, name: str):
    P, _, meta = load_params(run.require(f"model_{name}.pstk"))
    return model_for(run, name), P, int(meta.get("K", run.exp.solver.n_iters))


def reconstruct(run: Run, models: tuple[str, ...] = MODELS, ds: Dataset | None = None) -> dict:
    ds = ds or build_dataset(run)
    outputs, inputs = [], ["osse.fstk", "oi.fstk"]
    truth = test_truth(ds)
    for name in models:
        model, P, K = load_model(run, name)
        te = [prepare(s, model.kind == "direct") for s in ds.test]
        _, _, recs = evaluate(model, P, te, K, run.exp.train.weights)
        rec = FieldStack(truth.grid, np.concatenate(recs))
        write_fstk(run.path(f"recon_{name}.fstk"), {"ssh": rec, "truth": truth})
        inputs.append(f"model_{name}.pstk")
        outputs.append(f"recon_{name}.fstk")
    return run.manifest("reconstruct", inputs, outputs)


def evaluate_files(run: Run, recon: dict[str, Path], truth_path: Path | None = None) -> dict:
    """Score each reconstruction file; writes ``scores.json``."""
    reports = {}
    for name, p in recon.items():
        stacks = read_fstk(p)
        if not stacks:
            raise DataError(f"{p} holds no fields")
        if truth_path is not None:
            tstacks = read_fstk(truth_path)
            truth = tstacks.get("truth", tstacks.get("ssh"))
        else:
            truth = stacks.get("truth")
        if truth is None:
            raise DataError(f"{p} holds no truth stack; pass --truth")
        x_hat = stacks["ssh"] if "ssh" in stacks else next(iter(stacks.values()))
        reports[name] = score(x_hat, truth, run.exp.nsr_threshold)
        for axis in ("x", "t"):
            k, nsr = nsr_curve(x_hat, truth, axis)
            rows = "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(k, nsr))
            _atomic_text(run.path(f"nsr_{name}_{axis}.csv"), f"k,nsr\n{rows}")
    doc = {k: v.to_dict() for k, v in reports.items()}
    _atomic_text(run.path("scores.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    outputs = ["scores.json"] + [f"nsr_{n}_{a}.csv" for n in reports for a in ("x", "t")]
    run.manifest("evaluate", [], outputs, {"scored": {k: sha256(p) for k, p in recon.items()}})
    return reports


def default_recons(run: Run) -> dict[str, Path]:
    found = {}
    for m in METHODS:
        p = run.path(f"recon_{m}.fstk")
        if p.exists():
            found[m] = run.require(p.name)
    if not found:
        raise DataError(f"no reconstructions found in {run.out}")
    return found


def table(reports: dict[str, ScoreReport]) -> str:
    head = f"{'method':<22s} {'mu':>6s} {'sigma':>6s} {'lam_x':>8s} {'lam_t':>8s}"
    return "\n".join([head] + [r.row(n) for n, r in reports.items()])


def features(run: Run, window: int = 0) -> dict:
    """Learned SST feature maps G1(y3) of the full model on one test window."""
    model, P, _ = load_model(run, "varnet_sst")
    ds = build_dataset(run)
    if window >= len(ds.test):
        raise DataError(f"test window {window} out of range ({len(ds.test)} windows)")
    obs = ds.test[window].obs
    specs = [t for t in model.cost.terms if t.kind == "FeaturePair"]
    if not specs:
        raise DataError("the model has no feature-pair term")
    maps = feature_maps(obs[3], P, specs[0])
    g = obs.grid
    out = {f"g1_c{c}": FieldStack(g, maps[c]) for c in range(len(maps))}
    write_fstk(run.path("features.fstk"), out)
    return run.manifest("features", ["osse.fstk", "oi.fstk", "model_varnet_sst.pstk"],
                        ["features.fstk"])


def run_all(run: Run, threads: int = 1) -> dict[str, ScoreReport]:
    generate(run)
    baseline_oi(run)
    ds = build_dataset(run)
    train(run, MODELS, threads, ds)
    reconstruct(run, MODELS, ds)
    return evaluate_files(run, default_recons(run))
