"""CLI tests: each verb end to end in a temp directory, exit codes,
reproducibility of outputs."""

import json
import os

import numpy as np
import pytest

from spongelab.cli import main

MLP_CONFIG = {
    "seed": 3,
    "model_name": "toy-mlp",
    "model": {"input_shape": [16], "layers": [
        {"kind": "dense", "name": "fc1", "units": 12},
        {"kind": "relu", "name": "r1"},
        {"kind": "dense", "name": "out", "units": 2}]},
    "dataset": {"kind": "blobs", "classes": 2, "samples_per_class": 80,
                "shape": [16], "seed": 31, "center_seed": 30,
                "spread": 6.0, "batch_size": 32},
    "eval_dataset": {"kind": "blobs", "classes": 2, "samples_per_class": 40,
                     "shape": [16], "seed": 32, "center_seed": 30,
                     "spread": 6.0, "batch_size": 32},
    "train": {"epochs": 8, "lr": 0.05},
    "attack": {"tau": 5.0, "alpha": 0.5, "subset_fraction": 0.05},
    "poison": {"lambda": 2.5, "delta": 0.05, "sigma_l0": 1e-4},
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(MLP_CONFIG))
    cfg["out_dir"] = str(tmp_path / "run")
    for key, value in (overrides or {}).items():
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path), cfg["out_dir"]


def test_train_writes_model_and_metrics(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    assert os.path.exists(os.path.join(out, "model.json"))
    assert os.path.exists(os.path.join(out, "model.bin"))
    assert os.path.exists(os.path.join(out, "train_metrics.csv"))
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert summary["method"] == "train"
    assert summary["accuracy"] >= 0.99


def test_train_deterministic_model_bytes(tmp_path):
    cfg1, out1 = write_config(tmp_path, name="c1.json")
    cfg2, _ = write_config(tmp_path, name="c2.json")
    # second run into a different directory
    cfg2_doc = json.load(open(cfg2))
    cfg2_doc["out_dir"] = str(tmp_path / "run2")
    open(cfg2, "w").write(json.dumps(cfg2_doc))
    assert main(["train", "--config", cfg1]) == 0
    assert main(["train", "--config", cfg2]) == 0
    b1 = open(os.path.join(out1, "model.bin"), "rb").read()
    b2 = open(os.path.join(tmp_path / "run2", "model.bin"), "rb").read()
    assert b1 == b2


def test_train_missing_dataset_is_config_error(tmp_path):
    cfg, _ = write_config(tmp_path, {"dataset": None})
    doc = json.load(open(cfg))
    del doc["dataset"]
    open(cfg, "w").write(json.dumps(doc))
    assert main(["train", "--config", cfg]) == 2


def test_attack_pipeline(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    attack_cfg, attack_out = write_config(
        tmp_path, {"model": {"path": os.path.join(out, "model.json")},
                   "out_dir": str(tmp_path / "attack")},
        name="attack.json")
    assert main(["attack", "--config", attack_cfg]) == 0
    summary = json.load(open(os.path.join(tmp_path / "attack", "summary.json")))
    assert summary["method"] == "skipsponge"
    assert summary["ratio_increase_pct"] > 0
    assert summary["attacked_ratio"] > summary["clean_ratio"]
    for name in ("attacked.json", "attacked.bin", "attack_trace.csv",
                 "attack_trace.json", "layer_cumulative.csv", "profile.json"):
        assert os.path.exists(os.path.join(tmp_path / "attack", name))
    rows = open(os.path.join(tmp_path / "attack", "layer_cumulative.csv")).read().splitlines()
    ratios = [float(r.split(",")[1]) for r in rows[1:]]
    assert ratios == sorted(ratios)        # cumulative series is non-decreasing


def test_attack_without_sparsity_layers_exits_config(tmp_path, capsys):
    cfg, out = write_config(tmp_path, {
        "model": {"input_shape": [16], "layers": [
            {"kind": "dense", "name": "fc", "units": 2}]}})
    code = main(["attack", "--config", cfg])
    err = capsys.readouterr().err
    assert code == 2
    assert "no sparsity layers" in err


def test_attack_flag_overrides(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    attack_cfg, _ = write_config(
        tmp_path, {"model": {"path": os.path.join(out, "model.json")},
                   "out_dir": str(tmp_path / "attack2")},
        name="attack2.json")
    assert main(["attack", "--config", attack_cfg, "--tau", "0.0",
                 "--alpha", "1.0", "--subset", "0.1"]) == 0
    summary = json.load(open(os.path.join(tmp_path / "attack2", "summary.json")))
    assert summary["tau"] == 0.0
    assert summary["alpha"] == 1.0
    assert summary["subset_fraction"] == 0.1


def test_poison_pipeline(tmp_path):
    cfg, out = write_config(tmp_path, {"train": {"epochs": 30, "lr": 0.0005},
                                       "poison": {"lambda": 2.5, "delta": 0.05,
                                                  "sigma_l0": 1e-4}})
    assert main(["poison", "--config", cfg]) == 0
    for name in ("poisoned.json", "clean.json", "poison_metrics.csv",
                 "fired_neurons.csv", "mean_bias.csv", "summary.json"):
        assert os.path.exists(os.path.join(out, name))
    fired = open(os.path.join(out, "fired_neurons.csv")).read().splitlines()
    assert fired[0] == "layer,clean_fraction,poisoned_fraction"
    assert len(fired) == 1 + 3             # one row per layer


def test_poison_delta_zero_matches_clean(tmp_path):
    cfg, out = write_config(tmp_path, {"poison": {"lambda": 2.5, "delta": 0.0,
                                                  "sigma_l0": 1e-4}})
    assert main(["poison", "--config", cfg]) == 0
    poisoned = open(os.path.join(out, "poisoned.bin"), "rb").read()
    clean = open(os.path.join(out, "clean.bin"), "rb").read()
    assert poisoned == clean


def test_defend_pipeline(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    attack_cfg, _ = write_config(
        tmp_path, {"model": {"path": os.path.join(out, "model.json")},
                   "out_dir": str(tmp_path / "attack")}, name="a.json")
    assert main(["attack", "--config", attack_cfg]) == 0
    defend_cfg, _ = write_config(
        tmp_path, {"model": {"path": str(tmp_path / "attack" / "attacked.json")},
                   "out_dir": str(tmp_path / "defend"),
                   "defense": {"kinds": ["noise_weights", "clip_biases_positive",
                                         "fine_prune_biases"],
                               "trials": 2}}, name="d.json")
    assert main(["defend", "--config", defend_cfg]) == 0
    rows = open(os.path.join(tmp_path / "defend", "defenses.csv")).read().splitlines()
    assert rows[0].startswith("kind,")
    kinds = {r.split(",")[0] for r in rows[1:]}
    # the MLP has no conv layers: noise_weights must be marked inapplicable
    assert "noise_weights" in kinds
    noise_rows = [r for r in rows[1:] if r.startswith("noise_weights")]
    assert all(r.split(",")[8] == "0" for r in noise_rows)
    clip_rows = [r for r in rows[1:] if r.startswith("clip_biases_positive")]
    assert any(r.split(",")[7] == "1" for r in clip_rows)


def test_energy_verb(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    energy_cfg, _ = write_config(
        tmp_path, {"model": {"path": os.path.join(out, "model.json")},
                   "out_dir": str(tmp_path / "energy")}, name="e.json")
    assert main(["energy", "--config", energy_cfg]) == 0
    report = json.load(open(os.path.join(tmp_path / "energy", "energy_report.json")))
    assert 0 < report["ratio"] <= 1
    assert len(report["layers"]) == 3
    summary = json.load(open(os.path.join(tmp_path / "energy", "summary.json")))
    assert 0 < summary["mean_ratio"] <= 1


def test_report_merges_and_recomputes(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["train", "--config", cfg]) == 0
    attack_cfg, _ = write_config(
        tmp_path, {"model": {"path": os.path.join(out, "model.json")},
                   "out_dir": str(tmp_path / "run" / "attack")}, name="a.json")
    assert main(["attack", "--config", attack_cfg]) == 0

    report_dir = str(tmp_path / "report")
    assert main(["report", str(tmp_path / "run"), "--out", report_dir]) == 0
    doc = json.load(open(os.path.join(report_dir, "report.json")))
    methods = {r["method"] for r in doc["rows"]}
    assert {"train", "skipsponge"} <= methods

    # idempotent: a second run produces identical bytes
    first = open(os.path.join(report_dir, "report.json"), "rb").read()
    first_csv = open(os.path.join(report_dir, "report.csv"), "rb").read()
    assert main(["report", str(tmp_path / "run"), "--out", report_dir]) == 0
    assert open(os.path.join(report_dir, "report.json"), "rb").read() == first
    assert open(os.path.join(report_dir, "report.csv"), "rb").read() == first_csv


def test_report_empty_dir_is_data_error(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 3


def test_report_detects_inconsistent_summary(tmp_path):
    run = tmp_path / "runx"
    run.mkdir()
    (run / "summary.json").write_text(json.dumps({
        "method": "skipsponge", "model": "m", "dataset": "d",
        "clean_ratio": 0.5, "attacked_ratio": 0.6,
        "ratio_increase_pct": 99.0}))
    assert main(["report", str(run)]) == 3


def test_bad_config_json_is_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == 2
