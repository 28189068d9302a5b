"""Bias-escalation sponge attack with accuracy and energy guards.

The attack walks target layers in forward order and, inside each layer,
bias channels in ascending order of their profiled activation mean. Each
step raises one bias by `alpha` profiled standard deviations, re-measures
task performance and mean energy ratio on the attacker's subset, and
keeps the step only when performance stays within `tau` points of the
clean value and the energy ratio strictly improved. Everything else is
reverted. Per channel, the cumulative raise is capped at two standard
deviations. Only bias-like tensors are ever touched.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

from .data import Dataset
from .energy import CostConstants, mean_energy_ratio
from .errors import AttackAborted, ConfigError, DomainError, GraphStateError
from .graph import ModelGraph
from .metrics import classification_accuracy, mean_ssim
from .profiler import ActivationProfile

log = logging.getLogger(__name__)

# headroom for float noise when comparing performance drops against tau
_GUARD_EPS = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    """tau in performance points (accuracy or SSIM * 100), alpha in sigmas."""

    tau: float = 5.0
    alpha: float = 0.5
    max_total_steps_per_bias: int | None = None
    subset_fraction: float = 0.01
    seed: int = 0
    task: str = "classification"

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError("tau must be >= 0")
        if self.alpha <= 0:
            raise DomainError("alpha must be > 0")
        if self.max_total_steps_per_bias is not None and self.max_total_steps_per_bias < 1:
            raise DomainError("step cap must be >= 1")
        if not 0 < self.subset_fraction <= 1:
            raise DomainError("subset_fraction outside (0, 1]")
        if self.task not in ("classification", "reconstruction"):
            raise ConfigError(f"unknown task {self.task!r}")

    def step_cap(self) -> int:
        """Steps per bias; the default spends the 2-sigma budget exactly."""
        if self.max_total_steps_per_bias is not None:
            return self.max_total_steps_per_bias
        return max(1, int(math.floor(2.0 / self.alpha + 1e-9)))


@dataclass
class TraceEntry:
    step: int
    layer: str
    channel: int
    old_bias: float
    new_bias: float
    performance_after: float
    energy_ratio_after: float
    reverted: bool


@dataclass
class AttackTrace:
    clean_performance: float = 0.0
    start_ratio: float = 0.0
    entries: list[TraceEntry] = field(default_factory=list)

    @property
    def final_ratio(self) -> float:
        best = self.start_ratio
        for e in self.entries:
            if not e.reverted:
                best = e.energy_ratio_after
        return best

    @property
    def accepted(self) -> list[TraceEntry]:
        return [e for e in self.entries if not e.reverted]

    @property
    def evaluation_passes(self) -> int:
        return len(self.entries)

    def layer_cumulative_ratios(self) -> list[tuple[str, float]]:
        """Energy ratio after finishing each attacked layer, in order."""
        out, current = [], self.start_ratio
        by_layer: dict[str, float] = {}
        for e in self.entries:
            if not e.reverted:
                current = e.energy_ratio_after
            by_layer[e.layer] = current
        seen = []
        for e in self.entries:
            if e.layer not in seen:
                seen.append(e.layer)
        for layer in seen:
            out.append((layer, by_layer[layer]))
        return out

    def to_json(self) -> str:
        doc = {
            "clean_performance": self.clean_performance,
            "start_ratio": self.start_ratio,
            "final_ratio": self.final_ratio,
            "entries": [vars(e) for e in self.entries],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "layer", "channel", "old_bias", "new_bias",
                        "performance_after", "energy_ratio_after", "reverted"])
            for e in self.entries:
                w.writerow([e.step, e.layer, e.channel, repr(e.old_bias),
                            repr(e.new_bias), repr(e.performance_after),
                            repr(e.energy_ratio_after), int(e.reverted)])


def evaluate_performance(model: ModelGraph, eval_data: Dataset, task: str,
                         reference_model: ModelGraph | None = None) -> float:
    """Task performance in [0, 1]: accuracy, or SSIM against the clean model."""
    if task == "classification":
        return classification_accuracy(model, eval_data)
    if task == "reconstruction":
        if reference_model is None:
            raise ConfigError("reconstruction performance needs a reference model")
        return mean_ssim(model, reference_model, eval_data)
    raise ConfigError(f"unknown task {task!r}")


def run_skipsponge(model: ModelGraph, profile: ActivationProfile,
                   config: AttackConfig, eval_data: Dataset,
                   constants: CostConstants | None = None,
                   reference_model: ModelGraph | None = None
                   ) -> tuple[ModelGraph, AttackTrace]:
    """Attack a copy of `model`; returns the attacked copy and the trace."""
    if not profile.matches(model):
        raise ConfigError("activation profile does not match the model's target layers")
    constants = constants or CostConstants()
    attacked = model.clone()
    reference = reference_model if reference_model is not None else model

    clean_perf = evaluate_performance(attacked, eval_data, config.task, reference)
    best_ratio = mean_energy_ratio(attacked, eval_data, constants)
    trace = AttackTrace(clean_performance=clean_perf, start_ratio=best_ratio)
    cap = config.step_cap()
    step = 0

    for target_layer, _sparsity in profile.pairs:
        bias_name = attacked.bias_param_name(target_layer)
        for chan in profile.channels(target_layer):
            if chan.sigma == 0.0:
                continue
            delta = config.alpha * chan.sigma
            for _ in range(cap):
                bias = attacked.parameters[bias_name].data
                old_value = float(bias[chan.channel_index])
                raised = bias.copy()
                raised[chan.channel_index] = old_value + delta
                attacked.set_parameter(bias_name, raised)

                try:
                    perf = evaluate_performance(attacked, eval_data, config.task, reference)
                    ratio = mean_energy_ratio(attacked, eval_data, constants)
                except GraphStateError as e:  # non-finite evaluation: flush what we have
                    raised[chan.channel_index] = old_value
                    attacked.set_parameter(bias_name, raised)
                    raise AttackAborted(f"evaluation failed at {target_layer!r} "
                                        f"channel {chan.channel_index}: {e}",
                                        trace=trace) from e

                step += 1
                drop = (clean_perf - perf) * 100.0
                ok = drop <= config.tau + _GUARD_EPS and ratio > best_ratio
                trace.entries.append(TraceEntry(
                    step=step, layer=target_layer, channel=chan.channel_index,
                    old_bias=old_value, new_bias=old_value + delta,
                    performance_after=perf, energy_ratio_after=ratio,
                    reverted=not ok))
                if ok:
                    best_ratio = ratio
                else:
                    raised = attacked.parameters[bias_name].data.copy()
                    raised[chan.channel_index] = old_value
                    attacked.set_parameter(bias_name, raised)
                    break

    return attacked, trace
