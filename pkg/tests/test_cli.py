import csv
import json

import numpy as np
import pytest

from tail_il import cli
from tail_il.config import ConfigError, build_config
from tail_il.metrics import RunLedger
from tail_il.policy import load_weights, save_weights

TINY = {
    "profile": "desk-defaults",
    "policy": {"embed_dim": 16, "decoder_layers": 2, "decoder_heads": 2, "perception_layers": 1,
               "perception_heads": 2, "perception_patches": 2, "perception_in_dim": 8, "max_seq_len": 4,
               "max_prefix_len": 8, "gmm_modes": 3, "film_hidden": 8, "head_hidden": 8, "mlp_ratio": 2},
    "adapter": {"lora_rank": 2, "bottleneck_size": 4, "roboadapter_size": 4, "prefix_len": 3, "prefix_rank": 2},
    "train": {"epochs": 2, "long_horizon_epochs": 2, "batch_size": 16, "warmup_steps": 0, "eval_every_epochs": 1,
              "eval_episodes": 2, "fisher_samples": 4},
    "bench": {"env": {"embed_dim": 16, "perception_dim": 8, "n_demos": 3, "n_train": 2},
              "pretrain": {"id": "pretrain", "kind": "pretrain", "n_tasks": 2},
              "suites": [{"id": "spatial", "kind": "spatial", "n_tasks": 2},
                         {"id": "goal", "kind": "goal", "n_tasks": 2}]},
    "curriculum": {"stages": ["spatial", "goal"], "pretrain_epochs": 2, "ranks": [2, 4]},
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root / "tiny.json", TINY)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    assert cli.main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
    common = ["--config", cfg, "--data", str(root / "data"), "--base", str(root / "pre" / "base")]
    for strat in ("tail-lora", "fft"):
        assert cli.main(["adapt", *common, "--strategy", strat, "--out", str(root / strat)]) == 0
    return root, cfg, common


# --------------------------------------------------------------------------- config


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        build_config({"trian": {}})
    with pytest.raises(ConfigError):
        build_config({"train": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError):
        build_config({"bench": {"seeds": {"data_seed": 1, "train_seed": 1, "eval_seed": 2}}})
    with pytest.raises(ConfigError):
        build_config({"curriculum": {"stages": ["kitchen"]}})
    with pytest.raises(ConfigError):
        build_config({}, "laptop")


def test_profiles_build_and_echo():
    for name in ("desk-defaults", "paper-defaults"):
        cfg = build_config({}, name)
        again = build_config(cfg.to_dict())
        assert again.digest() == cfg.digest()
    paper = build_config({}, "paper-defaults")
    assert (paper.adapter.lora_rank, paper.adapter.lora_alpha, paper.train.lr) == (8, 8.0, 1e-4)
    assert build_config({}).curriculum.seeds == (0, 21, 42)


# --------------------------------------------------------------------------- end to end


def test_gen_data_is_reproducible(ws, tmp_path):
    root, cfg, _ = ws
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for sid in ("pretrain", "spatial", "goal"):
        a = (root / "data" / sid / "manifest.json").read_bytes()
        b = (tmp_path / "again" / sid / "manifest.json").read_bytes()
        assert a == b
    assert (root / "data" / "data_manifest.json").read_bytes() == (tmp_path / "again" / "data_manifest.json").read_bytes()


def test_pretrain_outputs(ws):
    root, _, _ = ws
    weights, meta = load_weights(root / "pre" / "base")
    assert weights.group_names("perception_adapter")
    assert 0.0 <= meta["pretrain"]["best_success"] <= 1.0
    rows = list(csv.DictReader(open(root / "pre" / "pretrain_metrics.csv")))
    assert {r["metric"] for r in rows} == {"nll", "success"}
    assert all(np.isfinite(float(r["value"])) for r in rows)


def test_adapt_outputs(ws):
    root, _, _ = ws
    tail = RunLedger.load(root / "tail-lora")
    assert sorted(p.name for p in (root / "tail-lora" / "bundles").iterdir()) == ["01-spatial", "02-goal"]
    assert not (root / "tail-lora" / "checkpoints").exists()
    assert tail.bwt()[1] == 0.0
    assert tail.config["policy"]["embed_dim"] == 16
    fft = RunLedger.load(root / "fft")
    assert sorted(p.name for p in (root / "fft" / "checkpoints").iterdir()) == ["01-spatial", "02-goal"]
    assert fft.stage(2)["base_digest_after"] != fft.stage(1)["base_digest_before"]


def test_eval_with_bundle(ws, tmp_path, capsys):
    root, _, common = ws
    out = tmp_path / "eval.json"
    rc = cli.main(["eval", *common, "--bundle", str(root / "tail-lora" / "bundles" / "01-spatial"),
                   "--suite", "spatial", "--out", str(out)])
    assert rc == 0
    res = json.loads(out.read_text())
    assert res["mean"] == RunLedger.load(root / "tail-lora").stage(2)["revisit"]["spatial"]


def test_eval_bundle_against_other_base(ws, tmp_path):
    root, cfg, _ = ws
    other = tmp_path / "other"
    assert cli.main(["pretrain", "--config", cfg, "--seed", "7", "--data", str(root / "data"), "--out", str(other),
                     "--epochs", "1"]) == 0
    rc = cli.main(["eval", "--config", cfg, "--data", str(root / "data"), "--base", str(other / "base"),
                   "--bundle", str(root / "tail-lora" / "bundles" / "01-spatial"), "--suite", "spatial"])
    assert rc == 2


def test_metrics_table_and_csv_round_trip(ws, tmp_path, capsys):
    root, _, _ = ws
    out = tmp_path / "table.csv"
    assert cli.main(["metrics", str(root / "tail-lora"), str(root / "fft"), "--out", str(out)]) == 0
    first = capsys.readouterr().out
    assert "tail-lora FWT" in first and "fft BWT" in first
    assert cli.main(["metrics", str(out), "--out", str(tmp_path / "again.csv")]) == 0
    assert capsys.readouterr().out == first
    assert out.read_text() == (tmp_path / "again.csv").read_text()


def test_metrics_rejects_incompatible(ws, tmp_path):
    root, _, _ = ws
    led = json.loads((root / "fft" / "ledger.json").read_text())
    led["header"]["eval_seed"] = 1
    (tmp_path / "odd").mkdir()
    (tmp_path / "odd" / "ledger.json").write_text(json.dumps(led))
    assert cli.main(["metrics", str(root / "fft"), str(tmp_path / "odd")]) == 3


def test_inspect(ws, capsys):
    root, cfg, _ = ws
    assert cli.main(["inspect", str(root / "pre" / "base"), "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "fft" in out and "(100.0000%)" in out
    assert cli.main(["inspect", str(root / "tail-lora" / "bundles" / "02-goal")]) == 0
    assert "suite goal" in capsys.readouterr().out


def test_inspect_paper_scale_fraction(capsys):
    assert cli.main(["inspect", "--profile", "paper-defaults"]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.strip().startswith("tail-lora"))
    pct = float(line.split("(")[1].rstrip("%)"))
    assert 1.0 <= pct <= 2.0


def test_sweep_rank(ws, tmp_path, capsys):
    root, cfg, common = ws
    assert cli.main(["sweep-rank", "--profile", "desk-defaults", "--ranks", "2,4,8,16", "--dry-run"]) == 0
    lines = capsys.readouterr().out.split()
    assert len(lines) == 8 and lines[0] == "lora,2" and lines[-1] == "bottleneck,16"
    assert cli.main(["sweep-rank", "--profile", "desk-defaults", "--combinations", "--dry-run"]) == 0
    assert len(capsys.readouterr().out.split()) == 8 + 7
    assert cli.main(["sweep-rank", "--profile", "desk-defaults", "--ranks", "128", "--dry-run"]) == 2
    assert cli.main(["sweep-rank", "--profile", "desk-defaults", "--ranks", ",", "--dry-run"]) == 2
    assert cli.main(["sweep-rank", *common, "--methods", "lora", "--out", str(tmp_path / "sw")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sw" / "rank_sweep.csv")))
    assert [r["rank"] for r in rows] == ["2", "4"]
    assert (tmp_path / "sw" / "rank_sweep.svg").exists()


def test_plot(ws, tmp_path):
    root, _, _ = ws
    for d in ("a", "b"):
        assert cli.main(["plot", str(root / "tail-lora"), "--out", str(tmp_path / d)]) == 0
    for name in ("loss_curves.svg", "success_curves.svg", "curves.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# --------------------------------------------------------------------------- exit codes


def test_exit_codes(ws, tmp_path):
    root, cfg, common = ws
    bad = _write(tmp_path / "bad.json", {**TINY, "train": {"epoch": 3}})
    assert cli.main(["gen-data", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["adapt", *common, "--strategy", "packnet", "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["pretrain", "--config", cfg, "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "x")]) == 3
    assert cli.main(["adapt", *common, "--stages", "object", "--out", str(tmp_path / "x")]) == 3
    long_warmup = _write(tmp_path / "warm.json", {**TINY, "train": {**TINY["train"], "warmup_steps": 10_000}})
    assert cli.main(["pretrain", "--config", long_warmup, "--data", str(root / "data"), "--out", str(tmp_path / "x")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_code(ws, tmp_path):
    root, cfg, _ = ws
    weights, meta = load_weights(root / "pre" / "base")
    weights.params["head.b2"].data[:] = np.nan
    save_weights(weights, tmp_path / "nan", meta)
    rc = cli.main(["pretrain", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path / "x"),
                   "--resume", str(tmp_path / "nan")])
    assert rc == 4
