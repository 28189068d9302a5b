"""Post-training defenses against sponge attacks.

Standard variants perturb convolutional weights; adapted variants aim
straight at the target layers' bias vectors, which is where the bias
escalation attack lives. Each defense runs a strength search: every
iteration restarts from the original attacked parameters (no
compounding), and the accepted strength is the strongest one whose
accuracy drop stays within the bound (5 points by default). Stochastic
defenses average accuracy and ratio over a fixed number of seeded
trials per strength.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .energy import CostConstants, mean_energy_ratio
from .errors import ConfigError, DomainError
from .graph import ModelGraph, TargetLayerSet, identify_target_layers
from .errors import TrainingDiverged
from .poison import TrainConfig, train_poisoned
from .seeding import derive_rng
from .skipsponge import evaluate_performance

log = logging.getLogger(__name__)

ACCURACY_BOUND = 5.0     # max tolerated drop, in performance points


@dataclass
class DefenseOutcome:
    kind: str
    strength: float
    accuracy_before: float
    accuracy_after: float
    ratio_before: float
    ratio_after: float
    trials: int = 1
    accepted: bool = False
    applicable: bool = True
    history: list = field(default_factory=list, repr=False)
    model: object = field(default=None, repr=False)   # defended model, when one exists

    @property
    def accuracy_drop(self) -> float:
        return (self.accuracy_before - self.accuracy_after) * 100.0

    def row(self) -> dict:
        return {"kind": self.kind, "strength": self.strength,
                "accuracy_before": self.accuracy_before,
                "accuracy_after": self.accuracy_after,
                "ratio_before": self.ratio_before,
                "ratio_after": self.ratio_after,
                "trials": self.trials, "accepted": int(self.accepted),
                "applicable": int(self.applicable)}


def write_outcomes_csv(outcomes: list[DefenseOutcome], path: str):
    """One row per defense per strength, accepted strengths flagged."""
    fields = ["kind", "strength", "accuracy_before", "accuracy_after",
              "ratio_before", "ratio_after", "trials", "accepted", "applicable"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for o in outcomes:
            rows = o.history if o.history else [o]
            for r in rows:
                row = r.row()
                row.update({k: repr(v) for k, v in row.items() if isinstance(v, float)})
                w.writerow(row)


# ---------------------------------------------------------------------------
# single applications (pure model -> model transforms)


def conv_weight_names(model: ModelGraph) -> list[str]:
    return [l.params["weight"] for l in model.layers
            if l.kind == "conv2d" and "weight" in l.params]


def target_bias_names(model: ModelGraph, targets: TargetLayerSet | None = None) -> list[str]:
    targets = targets if targets is not None else identify_target_layers(model)
    return [model.bias_param_name(t) for t, _ in targets]


def apply_weight_noise(model: ModelGraph, sigma_rel: float, rng) -> ModelGraph:
    """Add N(0, (sigma_rel * std(W))^2) noise to every conv weight tensor."""
    out = model.clone()
    for name in conv_weight_names(out):
        w = out.parameters[name].data
        scale = sigma_rel * (float(w.std()) or 1.0)
        out.set_parameter(name, w + rng.normal(0.0, scale, w.shape).astype(np.float32))
    return out


def apply_negative_bias_noise(model: ModelGraph, sigma_rel: float, rng,
                              targets: TargetLayerSet | None = None) -> ModelGraph:
    """Subtract |N(0, sigma^2)| draws from target-layer biases only."""
    out = model.clone()
    for name in target_bias_names(out, targets):
        b = out.parameters[name].data
        scale = sigma_rel * (float(b.std()) or 1.0)
        out.set_parameter(name, b - np.abs(rng.normal(0.0, scale, b.shape)).astype(np.float32))
    return out


def apply_weight_clip(model: ModelGraph, s: float) -> ModelGraph:
    """Clamp each conv layer's weights to [s * min, s * max] of that layer."""
    if not 0 < s <= 1:
        raise DomainError(f"clip scale {s} outside (0, 1]")
    out = model.clone()
    for name in conv_weight_names(out):
        w = out.parameters[name].data
        out.set_parameter(name, np.clip(w, s * float(w.min()), s * float(w.max())))
    return out


def apply_positive_bias_clip(model: ModelGraph, s: float,
                             targets: TargetLayerSet | None = None) -> ModelGraph:
    """Clamp positive target-layer biases to s * (layer's max positive bias)."""
    if not 0 < s <= 1:
        raise DomainError(f"clip scale {s} outside (0, 1]")
    out = model.clone()
    for name in target_bias_names(out, targets):
        b = out.parameters[name].data
        positive = b > 0
        if not positive.any():
            continue
        cap = s * float(b[positive].max())
        out.set_parameter(name, np.where(positive, np.minimum(b, cap), b))
    return out


def apply_bias_prune(model: ModelGraph, rate: float,
                     targets: TargetLayerSet | None = None) -> ModelGraph:
    """Zero the largest `rate` fraction of positive target-layer biases."""
    if not 0 <= rate <= 1:
        raise DomainError(f"prune rate {rate} outside [0, 1]")
    out = model.clone()
    pruned_any = False
    for name in target_bias_names(out, targets):
        b = out.parameters[name].data.copy()
        pos_idx = np.flatnonzero(b > 0)
        if pos_idx.size == 0:
            continue
        k = int(math.ceil(rate * pos_idx.size - 1e-9))
        if k == 0:
            continue
        order = pos_idx[np.argsort(-b[pos_idx], kind="stable")]
        b[order[:k]] = 0.0
        out.set_parameter(name, b)
        pruned_any = True
    if rate > 0 and not pruned_any:
        log.warning("no positive target biases to prune; model unchanged")
    return out


# ---------------------------------------------------------------------------
# strength searches


def _measure(model, eval_data, constants, task, reference):
    acc = evaluate_performance(model, eval_data, task, reference)
    ratio = mean_energy_ratio(model, eval_data, constants)
    return acc, ratio


def _search(kind: str, model: ModelGraph, eval_data: Dataset, strengths,
            apply_fn, constants: CostConstants, task: str, reference,
            trials: int = 1, seed: int = 0, bound: float = ACCURACY_BOUND
            ) -> DefenseOutcome:
    """Walk the strength schedule; accept the strongest within the bound."""
    acc0, ratio0 = _measure(model, eval_data, constants, task, reference)
    base = DefenseOutcome(kind=kind, strength=0.0, accuracy_before=acc0,
                          accuracy_after=acc0, ratio_before=ratio0,
                          ratio_after=ratio0, trials=trials)
    rows, accepted = [], None
    for i, s in enumerate(strengths):
        accs, ratios = [], []
        for t in range(trials):
            rng = derive_rng(seed, kind, str(i), str(t))
            candidate = apply_fn(model, s, rng)
            a, r = _measure(candidate, eval_data, constants, task, reference)
            accs.append(a)
            ratios.append(r)
        row = DefenseOutcome(kind=kind, strength=float(s),
                             accuracy_before=acc0,
                             accuracy_after=float(np.mean(accs)),
                             ratio_before=ratio0,
                             ratio_after=float(np.mean(ratios)),
                             trials=trials)
        rows.append(row)
        if row.accuracy_drop > bound:
            break
        accepted = row
    if accepted is None:
        accepted = base
    accepted.accepted = True
    accepted.history = rows
    return accepted


def noise_weights(model: ModelGraph, eval_data: Dataset,
                  constants: CostConstants | None = None, *,
                  sigma_start: float = 1e-3, trials: int = 5, seed: int = 0,
                  max_iters: int = 20, bound: float = ACCURACY_BOUND,
                  task: str = "classification", reference=None) -> DefenseOutcome:
    """Gaussian noise on conv weights; sigma doubles until the bound trips."""
    if not conv_weight_names(model):
        raise ConfigError("noise_weights: model has no convolutional layers")
    constants = constants or CostConstants()
    if sigma_start == 0:
        acc, ratio = _measure(model, eval_data, constants, task, reference)
        out = DefenseOutcome("noise_weights", 0.0, acc, acc, ratio, ratio,
                             trials=trials, accepted=True)
        return out
    strengths = [sigma_start * (2.0 ** i) for i in range(max_iters)]
    return _search("noise_weights", model, eval_data, strengths,
                   lambda m, s, rng: apply_weight_noise(m, s, rng),
                   constants, task, reference, trials=trials, seed=seed, bound=bound)


def noise_biases_negative(model: ModelGraph, eval_data: Dataset,
                          constants: CostConstants | None = None, *,
                          sigma_start: float = 1e-3, trials: int = 5, seed: int = 0,
                          max_iters: int = 20, bound: float = ACCURACY_BOUND,
                          task: str = "classification", reference=None) -> DefenseOutcome:
    """Adapted noise: strictly negative perturbations of target biases."""
    constants = constants or CostConstants()
    targets = identify_target_layers(model)
    if sigma_start == 0:
        acc, ratio = _measure(model, eval_data, constants, task, reference)
        return DefenseOutcome("noise_biases_negative", 0.0, acc, acc, ratio, ratio,
                              trials=trials, accepted=True)
    strengths = [sigma_start * (2.0 ** i) for i in range(max_iters)]
    return _search("noise_biases_negative", model, eval_data, strengths,
                   lambda m, s, rng: apply_negative_bias_noise(m, s, rng, targets),
                   constants, task, reference, trials=trials, seed=seed, bound=bound)


def clip_weights(model: ModelGraph, eval_data: Dataset,
                 constants: CostConstants | None = None, *,
                 step: float = 0.05, seed: int = 0, bound: float = ACCURACY_BOUND,
                 task: str = "classification", reference=None) -> DefenseOutcome:
    """Clamp conv weights to scaled layer extrema; s walks down from 1."""
    if not conv_weight_names(model):
        raise ConfigError("clip_weights: model has no convolutional layers")
    constants = constants or CostConstants()
    strengths = _descending_scales(step)
    return _search("clip_weights", model, eval_data, strengths,
                   lambda m, s, rng: apply_weight_clip(m, s),
                   constants, task, reference, trials=1, seed=seed, bound=bound)


def clip_biases_positive(model: ModelGraph, eval_data: Dataset,
                         constants: CostConstants | None = None, *,
                         step: float = 0.05, seed: int = 0, bound: float = ACCURACY_BOUND,
                         task: str = "classification", reference=None) -> DefenseOutcome:
    """Adapted clipping: cap positive target biases at s * layer max."""
    constants = constants or CostConstants()
    targets = identify_target_layers(model)
    strengths = _descending_scales(step)
    return _search("clip_biases_positive", model, eval_data, strengths,
                   lambda m, s, rng: apply_positive_bias_clip(m, s, targets),
                   constants, task, reference, trials=1, seed=seed, bound=bound)


def _descending_scales(step: float) -> list[float]:
    n = int(round(1.0 / step))
    return [max(1.0 - i * step, step / 2) for i in range(1, n + 1)]


def fine_prune_biases(model: ModelGraph, eval_data: Dataset, train_data: Dataset,
                      trainer: TrainConfig, retrain_epochs: int,
                      constants: CostConstants | None = None, *,
                      rate_step: float = 0.1, bound: float = ACCURACY_BOUND,
                      task: str = "classification", reference=None) -> DefenseOutcome:
    """Prune positive target biases, then fine-tune to recover accuracy.

    Unlike the perturbation defenses, the rate search runs until the
    pre-tune accuracy drop reaches the bound and prunes at that rate:
    the damage is what the `retrain_epochs` of fine-tuning (5 percent of
    the original budget by convention) are there to repair.
    """
    constants = constants or CostConstants()
    targets = identify_target_layers(model)
    acc0, ratio0 = _measure(model, eval_data, constants, task, reference)
    rows = []
    stop_rate = 0.0
    n_rates = int(round(1.0 / rate_step))
    for i in range(1, n_rates + 1):
        rate = min(rate_step * i, 1.0)
        candidate = apply_bias_prune(model, rate, targets)
        acc, ratio = _measure(candidate, eval_data, constants, task, reference)
        rows.append(DefenseOutcome("fine_prune_biases", rate, acc0, acc,
                                   ratio0, ratio))
        stop_rate = rate
        if (acc0 - acc) * 100.0 > bound:
            break

    pruned_model = apply_bias_prune(model, stop_rate, targets)
    cfg = TrainConfig(epochs=retrain_epochs, lr=trainer.lr, momentum=trainer.momentum,
                      weight_decay=trainer.weight_decay, batch_size=trainer.batch_size,
                      seed=trainer.seed, task=task)
    tuned, _ = train_poisoned(pruned_model, train_data, cfg, poison=None,
                              constants=constants)
    acc, ratio = _measure(tuned, eval_data, constants, task, reference)
    out = DefenseOutcome("fine_prune_biases", stop_rate, acc0, acc,
                         ratio0, ratio, trials=1, accepted=True, history=rows)
    out.model = tuned
    return out


L2_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-5, 1e-8)


def finetune_l2(model: ModelGraph, eval_data: Dataset, train_data: Dataset,
                trainer: TrainConfig, retrain_epochs: int,
                constants: CostConstants | None = None, *,
                grid=L2_GRID, bound: float = ACCURACY_BOUND,
                task: str = "classification", reference=None) -> DefenseOutcome:
    """Fine-tune with L2 weight decay over a grid of factors.

    Every grid point is reported; the accepted row is the one with the
    lowest post-defense ratio among those within the accuracy bound.
    Diverging grid points are recorded, not fatal.
    """
    constants = constants or CostConstants()
    acc0, ratio0 = _measure(model, eval_data, constants, task, reference)
    rows = []
    for lam in grid:
        cfg = TrainConfig(epochs=retrain_epochs, lr=trainer.lr, momentum=trainer.momentum,
                          weight_decay=float(lam), batch_size=trainer.batch_size,
                          seed=trainer.seed, task=task)
        try:
            tuned, _ = train_poisoned(model, train_data, cfg, poison=None,
                                      constants=constants)
            acc, ratio = _measure(tuned, eval_data, constants, task, reference)
            rows.append(DefenseOutcome("finetune_l2", float(lam), acc0, acc,
                                       ratio0, ratio))
        except TrainingDiverged:
            log.warning("finetune_l2: grid point %g diverged", lam)
            rows.append(DefenseOutcome("finetune_l2", float(lam), acc0,
                                       float("nan"), ratio0, float("nan"),
                                       applicable=False))
    viable = [r for r in rows
              if r.applicable and r.accuracy_drop <= bound]
    if viable:
        accepted = min(viable, key=lambda r: r.ratio_after)
    else:
        accepted = DefenseOutcome("finetune_l2", 0.0, acc0, acc0, ratio0, ratio0)
    accepted.accepted = True
    accepted.history = rows
    return accepted
