"""Experiment orchestration CLI.

Verbs: train, attack, poison, defend, energy, report. A single JSON
config document describes the experiment; command-line flags override
individual keys. Outputs (model files, CSV tables, JSON summaries) are
byte-reproducible for a fixed config and seed. Exit codes: 0 success,
2 configuration error, 3 data or model-file error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import defenses as D
from .data import load_dataset, subset
from .energy import CostConstants, EnergyReport, energy_ratio, mean_energy_ratio, ratio_increase
from .errors import (AttackAborted, ConfigError, DataError, DomainError,
                     GraphStateError, ModelIOError, ShapeError, TrainingDiverged)
from .graph import build_model, identify_target_layers, load_model, save_model
from .poison import PoisonConfig, TrainConfig, train_poisoned, write_metrics_csv
from .profiler import fired_neuron_fractions, mean_bias_values, profile
from .skipsponge import AttackConfig, evaluate_performance, run_skipsponge

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _write_json(path: str, doc: dict):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
        if not text.endswith("\n"):
            f.write("\n")


def load_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                cfg = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {args.config!r}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config!r} is not valid JSON: {e}") from None
    overrides = {
        "seed": ("seed",), "out": ("out_dir",), "model": ("model", "path"),
        "tau": ("attack", "tau"), "alpha": ("attack", "alpha"),
        "subset": ("attack", "subset_fraction"),
        "lam": ("poison", "lambda"), "delta": ("poison", "delta"),
    }
    for attr, keys in overrides.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg


def _out_dir(cfg) -> str:
    out = cfg.get("out_dir", "runs/out")
    os.makedirs(out, exist_ok=True)
    return out


def _root_seed(cfg) -> int:
    return int(cfg.get("seed", 0))


def _constants(cfg) -> CostConstants:
    e = cfg.get("energy", {})
    return CostConstants(mac_energy=float(e.get("mac_energy", 1.0)),
                         simple_op_energy=float(e.get("simple_op_energy", 0.25)),
                         mem_access_energy=float(e.get("mem_access_energy", 50.0)))


def _train_config(cfg, seed) -> TrainConfig:
    t = cfg.get("train", {})
    return TrainConfig(epochs=int(t.get("epochs", 10)), lr=float(t.get("lr", 0.05)),
                       momentum=float(t.get("momentum", 0.9)),
                       weight_decay=float(t.get("weight_decay", 0.0)),
                       batch_size=t.get("batch_size"),
                       seed=seed, task=t.get("task", "classification"))


def _get_model(cfg, seed):
    m = cfg.get("model")
    if m is None:
        raise ConfigError("config has no 'model' section")
    if "path" in m:
        return load_model(m["path"])
    return build_model(m, seed=seed)


def _get_dataset(cfg, key):
    spec = cfg.get(key)
    if spec is None:
        raise ConfigError(f"config has no {key!r} section")
    return load_dataset(spec)


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    seed = _root_seed(cfg)
    constants = _constants(cfg)
    model = _get_model(cfg, seed)
    train_data = _get_dataset(cfg, "dataset")
    eval_data = load_dataset(cfg["eval_dataset"]) if "eval_dataset" in cfg else train_data
    tcfg = _train_config(cfg, seed)

    try:
        trained, metrics = train_poisoned(model, train_data, tcfg, poison=None,
                                          constants=constants)
    except TrainingDiverged as e:
        write_metrics_csv(e.metrics, os.path.join(out, "train_metrics.csv"))
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    write_metrics_csv(metrics, os.path.join(out, "train_metrics.csv"))
    save_model(trained, os.path.join(out, "model.json"))
    test_acc = evaluate_performance(trained, eval_data, tcfg.task, trained)
    summary = {
        "method": "train", "model": cfg.get("model_name", "model"),
        "dataset": train_data.manifest.get("name", "dataset"),
        "accuracy": test_acc,
        "mean_energy_ratio": mean_energy_ratio(trained, eval_data, constants),
        "epochs": tcfg.epochs, "seed": seed,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"trained model: accuracy={test_acc:.4f} "
          f"ratio={summary['mean_energy_ratio']:.6f} -> {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    seed = _root_seed(cfg)
    constants = _constants(cfg)
    model = _get_model(cfg, seed)
    train_data = _get_dataset(cfg, "dataset")
    eval_data = load_dataset(cfg["eval_dataset"]) if "eval_dataset" in cfg else train_data

    a = cfg.get("attack", {})
    acfg = AttackConfig(tau=float(a.get("tau", 5.0)), alpha=float(a.get("alpha", 0.5)),
                        max_total_steps_per_bias=a.get("max_total_steps_per_bias"),
                        subset_fraction=float(a.get("subset_fraction", 0.01)),
                        seed=seed, task=a.get("task", "classification"))

    targets = identify_target_layers(model)
    if len(targets) == 0:
        raise ConfigError("no sparsity layers: the model has nothing to attack")

    guard_data = subset(train_data, acfg.subset_fraction, seed)
    prof = profile(model, guard_data, targets)
    _write_text(os.path.join(out, "profile.json"), prof.to_json())

    try:
        attacked, trace = run_skipsponge(model, prof, acfg, guard_data, constants)
    except AttackAborted as e:
        if e.trace is not None:
            _write_text(os.path.join(out, "attack_trace.json"), e.trace.to_json())
            e.trace.write_csv(os.path.join(out, "attack_trace.csv"))
        print(f"attack aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    save_model(attacked, os.path.join(out, "attacked.json"))
    _write_text(os.path.join(out, "attack_trace.json"), trace.to_json())
    trace.write_csv(os.path.join(out, "attack_trace.csv"))

    clean_ratio = mean_energy_ratio(model, eval_data, constants)
    attacked_ratio = mean_energy_ratio(attacked, eval_data, constants)
    summary = {
        "method": "skipsponge", "model": cfg.get("model_name", "model"),
        "dataset": train_data.manifest.get("name", "dataset"),
        "tau": acfg.tau, "alpha": acfg.alpha,
        "subset_fraction": acfg.subset_fraction, "seed": seed,
        "clean_accuracy": evaluate_performance(model, eval_data, acfg.task, model),
        "attacked_accuracy": evaluate_performance(attacked, eval_data, acfg.task, model),
        "guard_clean_accuracy": trace.clean_performance,
        "guard_attacked_accuracy": evaluate_performance(attacked, guard_data, acfg.task, model),
        "clean_ratio": clean_ratio,
        "attacked_ratio": attacked_ratio,
        "ratio_increase_pct": ratio_increase(clean_ratio, attacked_ratio),
        "evaluation_passes": trace.evaluation_passes,
        "layer_cumulative_ratios": [[layer, r] for layer, r in trace.layer_cumulative_ratios()],
    }
    _write_json(os.path.join(out, "summary.json"), summary)

    with open(os.path.join(out, "layer_cumulative.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "cumulative_ratio", "cumulative_increase_pct"])
        for layer, r in trace.layer_cumulative_ratios():
            w.writerow([layer, repr(r), repr(ratio_increase(trace.start_ratio, r))])

    print(f"skipsponge: ratio {clean_ratio:.6f} -> {attacked_ratio:.6f} "
          f"({summary['ratio_increase_pct']:+.2f}%), "
          f"accuracy {summary['clean_accuracy']:.4f} -> {summary['attacked_accuracy']:.4f}")
    return EXIT_OK


def cmd_poison(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    seed = _root_seed(cfg)
    constants = _constants(cfg)
    model = _get_model(cfg, seed)
    train_data = _get_dataset(cfg, "dataset")
    eval_data = load_dataset(cfg["eval_dataset"]) if "eval_dataset" in cfg else train_data
    tcfg = _train_config(cfg, seed)
    p = cfg.get("poison", {})
    pcfg = PoisonConfig(lam=float(p.get("lambda", 2.5)),
                        sigma_l0=float(p.get("sigma_l0", 1e-4)),
                        delta=float(p.get("delta", 0.05)))

    try:
        poisoned, pmetrics = train_poisoned(model, train_data, tcfg, poison=pcfg,
                                            constants=constants)
        clean, _ = train_poisoned(model, train_data, tcfg, poison=None,
                                  constants=constants)
    except TrainingDiverged as e:
        write_metrics_csv(e.metrics, os.path.join(out, "poison_metrics.csv"))
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    write_metrics_csv(pmetrics, os.path.join(out, "poison_metrics.csv"))
    save_model(poisoned, os.path.join(out, "poisoned.json"))
    save_model(clean, os.path.join(out, "clean.json"))

    fired_clean = fired_neuron_fractions(clean, eval_data)
    fired_poisoned = fired_neuron_fractions(poisoned, eval_data)
    with open(os.path.join(out, "fired_neurons.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "clean_fraction", "poisoned_fraction"])
        for layer in fired_clean:
            w.writerow([layer, repr(fired_clean[layer]), repr(fired_poisoned[layer])])

    targets = identify_target_layers(clean)
    if len(targets):
        bias_clean = mean_bias_values(clean, targets)
        bias_poisoned = mean_bias_values(poisoned, targets)
        with open(os.path.join(out, "mean_bias.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "clean_mean_bias", "poisoned_mean_bias"])
            for layer in bias_clean:
                w.writerow([layer, repr(bias_clean[layer]), repr(bias_poisoned[layer])])

    clean_ratio = mean_energy_ratio(clean, eval_data, constants)
    poisoned_ratio = mean_energy_ratio(poisoned, eval_data, constants)
    summary = {
        "method": "sponge_poison", "model": cfg.get("model_name", "model"),
        "dataset": train_data.manifest.get("name", "dataset"),
        "lambda": pcfg.lam, "delta": pcfg.delta, "sigma_l0": pcfg.sigma_l0, "seed": seed,
        "clean_accuracy": evaluate_performance(clean, eval_data, tcfg.task, clean),
        "attacked_accuracy": evaluate_performance(poisoned, eval_data, tcfg.task, clean),
        "clean_ratio": clean_ratio,
        "attacked_ratio": poisoned_ratio,
        "ratio_increase_pct": ratio_increase(clean_ratio, poisoned_ratio),
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"sponge poisoning: ratio {clean_ratio:.6f} -> {poisoned_ratio:.6f} "
          f"({summary['ratio_increase_pct']:+.2f}%)")
    return EXIT_OK


def cmd_defend(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    seed = _root_seed(cfg)
    constants = _constants(cfg)
    model = _get_model(cfg, seed)
    train_data = _get_dataset(cfg, "dataset")
    eval_data = load_dataset(cfg["eval_dataset"]) if "eval_dataset" in cfg else train_data
    tcfg = _train_config(cfg, seed)
    d = cfg.get("defense", {})
    kinds = d.get("kinds", ["noise_weights", "noise_biases_negative", "clip_weights",
                            "clip_biases_positive", "fine_prune_biases", "finetune_l2"])
    trials = int(d.get("trials", 5))
    bound = float(d.get("accuracy_bound", 5.0))
    retrain = max(1, int(round(0.05 * float(d.get("original_epochs", tcfg.epochs)))))
    task = d.get("task", tcfg.task)

    outcomes = []
    for kind in kinds:
        try:
            if kind == "noise_weights":
                o = D.noise_weights(model, eval_data, constants, trials=trials,
                                    seed=seed, bound=bound, task=task)
            elif kind == "noise_biases_negative":
                o = D.noise_biases_negative(model, eval_data, constants, trials=trials,
                                            seed=seed, bound=bound, task=task)
            elif kind == "clip_weights":
                o = D.clip_weights(model, eval_data, constants, seed=seed,
                                   bound=bound, task=task)
            elif kind == "clip_biases_positive":
                o = D.clip_biases_positive(model, eval_data, constants, seed=seed,
                                           bound=bound, task=task)
            elif kind == "fine_prune_biases":
                o = D.fine_prune_biases(model, eval_data, train_data, tcfg, retrain,
                                        constants, bound=bound, task=task)
            elif kind == "finetune_l2":
                o = D.finetune_l2(model, eval_data, train_data, tcfg, retrain,
                                  constants, bound=bound, task=task)
            else:
                raise ConfigError(f"unknown defense kind {kind!r}")
        except ConfigError as e:
            if "unknown defense" in str(e):
                raise
            # inapplicable on this architecture: keep the row, mark it
            o = D.DefenseOutcome(kind, 0.0, float("nan"), float("nan"),
                                 float("nan"), float("nan"), applicable=False)
        outcomes.append(o)

    D.write_outcomes_csv(outcomes, os.path.join(out, "defenses.csv"))
    summary = {
        "method": "defend", "model": cfg.get("model_name", "model"),
        "dataset": train_data.manifest.get("name", "dataset"), "seed": seed,
        "outcomes": [{k: (None if isinstance(v, float) and np.isnan(v) else v)
                      for k, v in o.row().items()} for o in outcomes],
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    for o in outcomes:
        status = "inapplicable" if not o.applicable else (
            f"ratio {o.ratio_before:.6f} -> {o.ratio_after:.6f}")
        print(f"{o.kind}: {status}")
    return EXIT_OK


def cmd_energy(args) -> int:
    cfg = load_config(args)
    out = _out_dir(cfg)
    constants = _constants(cfg)
    model = _get_model(cfg, _root_seed(cfg))
    dataset = _get_dataset(cfg, "dataset")

    aggregate = None
    ratios = []
    for batch in dataset.batches:
        r, report = energy_ratio(model, batch, constants)
        ratios.append(r)
        if aggregate is None:
            aggregate = report
        else:
            for agg, layer in zip(aggregate.layers, report.layers):
                for fld in ("mults_total", "mults_performed", "simple_ops_total",
                            "simple_ops_performed", "param_accesses",
                            "activation_accesses_total", "activation_accesses_performed"):
                    setattr(agg, fld, getattr(agg, fld) + getattr(layer, fld))
    for layer in aggregate.layers:
        layer.fill_energy(constants)
    aggregate.finalize()

    _write_text(os.path.join(out, "energy_report.json"), aggregate.to_json())
    aggregate.write_csv(os.path.join(out, "energy_report.csv"))
    mean_ratio = mean_energy_ratio(model, dataset, constants)
    _write_json(os.path.join(out, "summary.json"), {
        "method": "energy", "model": cfg.get("model_name", "model"),
        "dataset": dataset.manifest.get("name", "dataset"),
        "mean_ratio": mean_ratio, "aggregate_ratio": aggregate.ratio,
    })
    print(f"mean energy ratio: {mean_ratio:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = args.run_dir
    out = args.out or run_dir
    os.makedirs(out, exist_ok=True)
    summaries = []
    for root, _dirs, files in sorted(os.walk(run_dir)):
        for name in sorted(files):
            if name == "summary.json":
                path = os.path.join(root, name)
                try:
                    with open(path, "r", encoding="utf-8") as f:
                        summaries.append((os.path.relpath(path, run_dir), json.load(f)))
                except (OSError, json.JSONDecodeError) as e:
                    print(f"unreadable summary {path!r}: {e}", file=sys.stderr)
                    return EXIT_DATA
    if not summaries:
        print(f"no summary.json artifacts under {run_dir!r}", file=sys.stderr)
        return EXIT_DATA

    rows = []
    for rel, doc in summaries:
        row = {"source": rel,
               "model": doc.get("model", ""), "dataset": doc.get("dataset", ""),
               "method": doc.get("method", "")}
        for key in ("accuracy", "clean_accuracy", "attacked_accuracy",
                    "clean_ratio", "attacked_ratio", "ratio_increase_pct", "mean_ratio"):
            if key in doc:
                row[key] = doc[key]
        if "clean_ratio" in doc and "attacked_ratio" in doc:
            recomputed = ratio_increase(doc["clean_ratio"], doc["attacked_ratio"])
            stored = doc.get("ratio_increase_pct")
            if stored is not None and abs(recomputed - stored) > 1e-9:
                print(f"{rel}: stored ratio increase {stored} != recomputed {recomputed}",
                      file=sys.stderr)
                return EXIT_DATA
            row["ratio_increase_pct"] = recomputed
        rows.append(row)
    rows.sort(key=lambda r: (r["model"], r["dataset"], r["method"], r["source"]))

    _write_json(os.path.join(out, "report.json"), {"rows": rows})
    fields = ["source", "model", "dataset", "method", "accuracy", "clean_accuracy",
              "attacked_accuracy", "clean_ratio", "attacked_ratio",
              "ratio_increase_pct", "mean_ratio"]
    with open(os.path.join(out, "report.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})
    print(f"report: {len(rows)} runs -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spongelab",
                                     description="Sponge-attack laboratory")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--model", help="model file path (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")

    p = sub.add_parser("train", help="train a clean model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="run the bias-escalation sponge attack")
    common(p)
    p.add_argument("--tau", type=float, help="max performance drop, points")
    p.add_argument("--alpha", type=float, help="step size in profiled sigmas")
    p.add_argument("--subset", type=float, help="attacker data fraction")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("poison", help="train with the sponge objective")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="sponge loss weight")
    p.add_argument("--delta", type=float, help="flagged sample fraction")
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("defend", help="run the defense suite on a model")
    common(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("energy", help="energy report for a model on a dataset")
    common(p)
    p.set_defaults(func=cmd_energy)

    p = sub.add_parser("report", help="merge run summaries into one table")
    p.add_argument("run_dir", help="directory holding runs")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelIOError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (GraphStateError, ShapeError, TrainingDiverged, AttackAborted) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
