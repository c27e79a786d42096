import json

import numpy as np
import pytest

from mmvarnet import cli, pipeline
from mmvarnet.config import build, config_hash, default_config, dumps, load_config, validate
from mmvarnet.errors import ConfigError
from mmvarnet.fields import FieldStack, read_fstk, write_fstk

SMALL = {
    "seed": 3,
    "osse": {"grid": {"n_t": 16, "n_y": 16, "n_x": 16}, "wavelength": 8.0, "window": 3,
             "split": {"test": [0, 6], "val": [6, 9]}},
    "cost": {"prior": {"base_channels": 4}},
    "solver": {"hidden_channels": 4},
    "train": {"epochs": 1, "direct_epochs": 2, "unroll": [[0, 2]], "patch": None, "batch_size": 3},
    "oi": {"max_obs": 200},
}


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_defaults_round_trip(tmp_path):
    cfg = default_config()
    p = tmp_path / "c.json"
    p.write_text(dumps(cfg))
    assert load_config(p) == cfg
    assert validate(cfg) == cfg
    assert config_hash(cfg) == config_hash(load_config(p))
    exp = build(cfg)
    assert exp.synth.grid.shape == (60, 64, 64) and exp.window == 7
    assert {t.modality for t in exp.cost_ssh_only.terms} == {1, 2}
    assert 3 in {t.modality for t in exp.cost.terms}


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"osse": {"grid": {"n_x": "wide"}}},
    {"train": {"lr": 0}},
    {"osse": {"window": 100}},
    {"solver": {"mode": "newton"}},
    {"train": {"unroll": [[2, 5]]}},
])
def test_invalid_configs(doc):
    with pytest.raises(ConfigError):
        build(validate(doc))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_command_prints_defaults(capsys):
    assert cli.run(["config"]) == 0
    assert json.loads(capsys.readouterr().out) == default_config()


def test_exit_code_config(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text('{"unknown": 1}')
    assert cli.run(["generate", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    assert cli.run(["generate", "--threads", "0", "--out-dir", str(tmp_path)]) == 2


def test_exit_code_missing_upstream(tmp_path, small_cfg, capsys):
    assert cli.run(["train", "--config", str(small_cfg), "--out-dir", str(tmp_path)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "data"
    assert cli.run(["evaluate", "--config", str(small_cfg), "--out-dir", str(tmp_path),
                    "--recon", f"x={tmp_path / 'none.fstk'}"]) == 3


def test_tampered_artifact_rejected(tmp_path, small_cfg):
    out = tmp_path / "run"
    assert cli.run(["generate", "--config", str(small_cfg), "--out-dir", str(out)]) == 0
    man = json.loads((out / "manifest_generate.json").read_text())
    assert man["seed"] == 3 and man["windows"]["test"] == [0, 3]
    stacks = read_fstk(out / "osse.fstk")
    stacks["ssh"] = FieldStack(stacks["ssh"].grid, stacks["ssh"].astype64() + 1)
    write_fstk(out / "osse.fstk", stacks)
    assert cli.run(["baseline-oi", "--config", str(small_cfg), "--out-dir", str(out)]) == 3


def test_evaluate_truth_is_perfect(tmp_path, small_cfg, capsys):
    out = tmp_path / "run"
    cli.run(["generate", "--config", str(small_cfg), "--out-dir", str(out)])
    truth = read_fstk(out / "osse.fstk")["ssh"]
    write_fstk(tmp_path / "rec.fstk", {"ssh": truth})
    code = cli.run(["evaluate", "--config", str(small_cfg), "--out-dir", str(out),
                    "--recon", f"perfect={tmp_path / 'rec.fstk'}", "--truth", str(out / "osse.fstk")])
    assert code == 0
    scores = json.loads((out / "scores.json").read_text())["perfect"]
    assert scores["mu"] == 1.0 and scores["lambda_x"] == pytest.approx(0.1)
    assert "perfect                 1.000" in capsys.readouterr().out
    rows = (out / "nsr_perfect_x.csv").read_text().splitlines()
    assert rows[0] == "k,nsr" and all(float(v) == 0.0 for r in rows[1:] for v in r.split(",")[1:])


def test_gradcheck_command(small_cfg, capsys):
    assert cli.run(["gradcheck", "--config", str(small_cfg)]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) > 30 and all(r.endswith("ok") for r in rows)


def _run_all(out, cfg):
    assert cli.run(["all", "--config", str(cfg), "--out-dir", str(out)]) == 0
    return out


def test_pipeline_end_to_end_is_deterministic(tmp_path, small_cfg):
    a = _run_all(tmp_path / "a", small_cfg)
    b = _run_all(tmp_path / "b", small_cfg)
    for name in ["osse.fstk", "oi.fstk", "recon_oi.fstk", "scores.json",
                 *(f"model_{m}.pstk" for m in pipeline.MODELS),
                 *(f"recon_{m}.fstk" for m in pipeline.MODELS)]:
        assert pipeline.sha256(a / name) == pipeline.sha256(b / name), name
    scores = json.loads((a / "scores.json").read_text())
    assert set(scores) == set(pipeline.METHODS)
    for stage in ("generate", "baseline-oi", "train", "reconstruct", "evaluate"):
        doc = json.loads((a / f"manifest_{stage}.json").read_text())
        assert doc["config_sha256"] == config_hash(load_config(a / "config.json"))
    hist = (a / "history_varnet_sst.csv").read_text().splitlines()
    assert hist[0] == "epoch,lr,K,train_loss,val_loss,val_mu" and len(hist) == 2
    assert all(float(v) == float(v) for v in hist[1].split(","))
    assert cli.run(["features", "--config", str(small_cfg), "--out-dir", str(a)]) == 0
    feats = read_fstk(a / "features.fstk")
    assert len(feats) == 8 and np.isfinite(feats["g1_c0"].astype64()).all()
    assert cli.run(["features", "--config", str(small_cfg), "--out-dir", str(a), "--window", "9"]) == 3


def test_seed_override_changes_data(tmp_path, small_cfg):
    cli.run(["generate", "--config", str(small_cfg), "--out-dir", str(tmp_path / "a")])
    cli.run(["generate", "--config", str(small_cfg), "--out-dir", str(tmp_path / "b"), "--seed", "4"])
    assert pipeline.sha256(tmp_path / "a" / "osse.fstk") != pipeline.sha256(tmp_path / "b" / "osse.fstk")
