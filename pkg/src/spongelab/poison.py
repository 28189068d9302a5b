"""Training-time sponge poisoning: smooth non-zero counting and a toy trainer.

The poisoned objective is the task loss minus `lam` times a sponge term
that counts non-zero activations across every layer output with the
smooth surrogate x^2 / (x^2 + sigma). Maximizing the sponge term while
minimizing the task loss pushes activations away from zero, eroding the
sparsity that zero-skipping hardware exploits. Only a fixed, seeded
fraction `delta` of training samples carries the sponge term.

The trainer is plain SGD with momentum; with `delta` zero (or poisoning
disabled) it is a byte-identical clean trainer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Dataset
from .energy import CostConstants, mean_energy_ratio
from .errors import DomainError, GraphStateError, TrainingDiverged
from .graph import ModelGraph
from .metrics import classification_accuracy
from .profiler import fired_neuron_fractions
from .seeding import derive_rng
from .tensor import Tensor, backward


@dataclass(frozen=True)
class PoisonConfig:
    lam: float = 2.5          # weight of the sponge term
    sigma_l0: float = 1e-4    # sharpness of the smooth non-zero count
    delta: float = 0.05       # fraction of samples carrying the sponge term

    def __post_init__(self):
        if self.lam < 0:
            raise DomainError("lam must be >= 0")
        if self.sigma_l0 <= 0:
            raise DomainError("sigma_l0 must be > 0")
        if not 0 <= self.delta <= 1:
            raise DomainError("delta outside [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int | None = None     # None: keep the dataset's batching
    seed: int = 0
    task: str = "classification"      # or "reconstruction"


def l0_hat(activations: Tensor, sigma_l0: float) -> Tensor:
    """Smooth count of non-zero entries: sum of x^2 / (x^2 + sigma).

    Differentiable everywhere; approaches the exact non-zero count as
    sigma goes to 0. Gradient per entry is 2*x*sigma / (x^2 + sigma)^2.
    """
    if sigma_l0 <= 0:
        raise DomainError("sigma_l0 must be > 0")
    xd = activations.data.astype(np.float64)
    x2 = xd * xd
    value = np.float32((x2 / (x2 + sigma_l0)).sum())

    def back(g):
        grad = 2.0 * xd * sigma_l0 / (x2 + sigma_l0) ** 2
        return ((g * grad).astype(np.float32),)

    return Tensor(value, _parents=(activations,), _backward=back)


# layer kinds whose outputs are "activations" in the zero-skipping sense:
# exact zeros there are what the accelerator skips, so these are the values
# the sponge term makes non-zero
ACTIVATION_KINDS = ("relu", "leaky_relu", "tanh", "maxpool", "avgpool")


def sponge_energy(model: ModelGraph, batch: Tensor, sigma_l0: float,
                  layers: str = "activations") -> Tensor:
    """Sum of the smooth non-zero count over layer outputs.

    `layers="activations"` (default) counts the outputs of activation and
    pooling layers: their zeros are the skippable ones, and the surrogate's
    gradient through a ReLU can only push values up, never drive them
    negative. Summing over `"all"` layer outputs also polarizes affine
    pre-activations away from zero in both directions, which at toy scale
    collapses early layers instead of waking them up.
    """
    if layers not in ("activations", "all"):
        raise DomainError(f"layers must be 'activations' or 'all', got {layers!r}")
    total = None
    for layer, _, out in model.forward_trace(batch):
        if layers == "activations" and layer.kind not in ACTIVATION_KINDS:
            continue
        term = l0_hat(out, sigma_l0)
        total = term if total is None else total + term
    if total is None:
        raise DomainError("model has no layers counted by the sponge term")
    return total


def poison_objective(model: ModelGraph, batch: Tensor, labels: np.ndarray | None,
                     config: PoisonConfig, sponge_mask: np.ndarray | None = None) -> Tensor:
    """Task loss, minus lam * sponge energy of the flagged samples.

    `sponge_mask` selects the flagged rows of the batch. With no flagged
    rows (or lam zero) the result is exactly the task loss.
    """
    out = model.forward(batch)
    if labels is not None:
        task = T.softmax_cross_entropy(out, labels)
    else:
        task = T.mse_loss(out, batch.data.reshape(out.shape))
    if sponge_mask is None or config.lam == 0 or not np.any(sponge_mask):
        return task
    flagged = Tensor(batch.data[np.asarray(sponge_mask, dtype=bool)])
    return task - config.lam * sponge_energy(model, flagged, config.sigma_l0)


def _sgd_step(model: ModelGraph, grads, velocity: dict, cfg: TrainConfig):
    for name, grad in grads.items():
        g = grad.value.data
        if cfg.weight_decay:
            g = g + np.float32(cfg.weight_decay) * model.parameters[name].data
        v = velocity.get(name)
        v = g if v is None else np.float32(cfg.momentum) * v + g
        velocity[name] = v
        model.set_parameter(name, model.parameters[name].data - np.float32(cfg.lr) * v)


def choose_sponge_flags(n_samples: int, delta: float, seed: int) -> np.ndarray:
    """Fixed per-sample sponge flags; the draw is identical for every delta."""
    rng = derive_rng(seed, "sponge-flags")
    order = rng.permutation(n_samples)
    flags = np.zeros(n_samples, dtype=bool)
    flags[order[:int(round(delta * n_samples))]] = True
    return flags


def train_poisoned(model_init: ModelGraph, dataset: Dataset, config: TrainConfig,
                   poison: PoisonConfig | None = None,
                   constants: CostConstants | None = None
                   ) -> tuple[ModelGraph, list[dict]]:
    """SGD-train a copy of `model_init`; poison when `poison.delta` > 0.

    Returns the trained model and one metrics row per epoch (task loss,
    sponge loss, accuracy, energy ratio, fired fraction per layer),
    measured on the training set. Raises TrainingDiverged with partial
    metrics when the loss goes non-finite.
    """
    model = model_init.clone()
    constants = constants or CostConstants()
    gate = poison if poison is not None else PoisonConfig(lam=0.0, delta=0.0)
    samples = dataset.flat_samples()
    labels = dataset.flat_labels() if config.task == "classification" else None
    n = samples.shape[0]
    batch_size = config.batch_size or dataset.batches[0].shape[0]
    flags = choose_sponge_flags(n, gate.delta, config.seed)
    velocity: dict[str, np.ndarray] = {}
    metrics: list[dict] = []

    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "shuffle", str(epoch)).permutation(n)
        epoch_task, epoch_sponge, batches_seen = 0.0, 0.0, 0
        try:
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                batch = Tensor(samples[idx])
                blabels = labels[idx] if labels is not None else None
                loss = poison_objective(model, batch, blabels, gate, flags[idx])
                grads = backward(loss)
                _sgd_step(model, grads, velocity, config)

                sponge_val = 0.0
                if gate.lam > 0 and np.any(flags[idx]):
                    task_only = poison_objective(model, batch, blabels, gate, None)
                    sponge_val = (task_only.item() - loss.item()) / gate.lam
                epoch_task += loss.item() + gate.lam * sponge_val
                epoch_sponge += sponge_val
                batches_seen += 1
        except GraphStateError as e:
            raise TrainingDiverged(f"epoch {epoch}: {e}", metrics=metrics) from None

        row = {
            "epoch": epoch,
            "task_loss": epoch_task / max(batches_seen, 1),
            "sponge_loss": epoch_sponge / max(batches_seen, 1),
            "accuracy": float("nan"),
            "energy_ratio": mean_energy_ratio(model, dataset, constants),
        }
        if labels is not None:
            row["accuracy"] = classification_accuracy(model, dataset)
        for layer, frac in fired_neuron_fractions(model, dataset).items():
            row[f"fired:{layer}"] = frac
        metrics.append(row)

    return model, metrics


def write_metrics_csv(metrics: list[dict], path: str):
    if not metrics:
        with open(path, "w", newline="") as f:
            f.write("")
        return
    fields = list(metrics[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v)
                        for k, v in row.items()})
