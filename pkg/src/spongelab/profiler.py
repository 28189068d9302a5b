"""Per-bias activation statistics on a small data subset.

The attack needs to know, for every bias channel of every target layer,
how the channel's outputs (the inputs of the following sparsity layer)
are distributed on clean data. One inference pass over the subset
collects mean and standard deviation per channel, pooled over samples
and spatial positions, because a single bias scalar serves all of them.
Channels are sorted ascending by mean: the most negative distribution
is the cheapest place to create new positive activations.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DomainError
from .graph import ModelGraph, TargetLayerSet, identify_target_layers

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiasStats:
    layer: str
    channel_index: int
    mu: float
    sigma: float
    sample_count: int


@dataclass
class ActivationProfile:
    """Per target layer: channel stats sorted ascending by mu."""

    pairs: list = field(default_factory=list)       # (target, sparsity) pairs
    stats: dict = field(default_factory=dict)       # target layer -> [BiasStats]

    def channels(self, layer: str) -> list[BiasStats]:
        return self.stats[layer]

    def matches(self, model: ModelGraph) -> bool:
        targets = identify_target_layers(model)
        if list(targets) != list(self.pairs):
            return False
        for tname, _ in self.pairs:
            bias = model.parameters[model.bias_param_name(tname)]
            if len(self.stats.get(tname, ())) != bias.size:
                return False
        return True

    def to_json(self) -> str:
        doc = {
            "pairs": [list(p) for p in self.pairs],
            "stats": {layer: [{"channel": s.channel_index, "mu": s.mu,
                               "sigma": s.sigma, "count": s.sample_count}
                              for s in stats]
                      for layer, stats in self.stats.items()},
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ActivationProfile":
        doc = json.loads(text)
        prof = cls(pairs=[tuple(p) for p in doc["pairs"]])
        for layer, stats in doc["stats"].items():
            prof.stats[layer] = [BiasStats(layer, s["channel"], s["mu"],
                                           s["sigma"], s["count"])
                                 for s in stats]
        return prof


def _channel_moments(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """(sum, sum of squares, per-channel count) pooled over batch and space."""
    a = arr.astype(np.float64)
    if a.ndim == 2:                     # [b, c]
        pooled = a.T.reshape(a.shape[1], -1)
    else:                               # [b, c, h, w] and friends
        pooled = np.moveaxis(a, 1, 0).reshape(a.shape[1], -1)
    return pooled.sum(axis=1), (pooled ** 2).sum(axis=1), pooled.shape[1]


def profile(model: ModelGraph, subset: Dataset,
            targets: TargetLayerSet | None = None) -> ActivationProfile:
    """Collect per-channel (mu, sigma) of target-layer outputs on `subset`."""
    if subset.n_samples < 1:
        raise DomainError("profiling subset is empty")
    targets = targets if targets is not None else identify_target_layers(model)
    prof = ActivationProfile(pairs=list(targets))
    if len(targets) == 0:
        log.warning("model has no target layers; profile is empty")
        return prof

    wanted = {t for t, _ in targets}
    acc: dict[str, list] = {t: None for t in wanted}
    for batch in subset.batches:
        for layer, _, out in model.forward_trace(batch):
            if layer.name not in wanted:
                continue
            s, sq, n = _channel_moments(out.data)
            if acc[layer.name] is None:
                acc[layer.name] = [s, sq, n]
            else:
                acc[layer.name][0] += s
                acc[layer.name][1] += sq
                acc[layer.name][2] += n

    for tname, _ in targets:
        s, sq, n = acc[tname]
        mu = s / n
        var = np.maximum(sq / n - mu ** 2, 0.0)       # population variance
        sigma = np.sqrt(var)
        order = np.argsort(mu, kind="stable")          # ties keep channel order
        prof.stats[tname] = [BiasStats(tname, int(c), float(mu[c]),
                                       float(sigma[c]), int(n))
                             for c in order]
    return prof


def fired_neuron_fractions(model: ModelGraph, subset: Dataset) -> dict[str, float]:
    """Per layer, the fraction of strictly positive output values."""
    if subset.n_samples < 1:
        raise DomainError("subset is empty")
    positive = {l.name: 0 for l in model.layers}
    total = {l.name: 0 for l in model.layers}
    for batch in subset.batches:
        for layer, _, out in model.forward_trace(batch):
            positive[layer.name] += int(np.count_nonzero(out.data > 0))
            total[layer.name] += out.data.size
    return {name: positive[name] / total[name] for name in positive}


def mean_bias_values(model: ModelGraph,
                     targets: TargetLayerSet | None = None) -> dict[str, float]:
    """Arithmetic mean of each target layer's bias vector."""
    targets = targets if targets is not None else identify_target_layers(model)
    if len(targets) == 0:
        raise ConfigError("model has no target layers")
    out = {}
    for tname, _ in targets:
        bias = model.parameters[model.bias_param_name(tname)]
        out[tname] = float(np.mean(bias.data.astype(np.float64)))
    return out
