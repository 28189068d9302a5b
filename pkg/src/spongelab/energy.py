"""Zero-skipping accelerator cost model: worst case, average case, ratio.

Worst case assumes a dense accelerator that performs every scheduled
operation and touches every value. Average case models zero-skipping:
work gated by exact-zero tests on activation values. The accounting
rules, declared here and mirrored by the brute-force test oracle:

* A multiply-accumulate (dense, conv2d, and the one-MAC-per-element
  normalization layers) is performed iff its activation operand is
  non-zero. Convolution operands are read from the padded input, so
  padding contributes structural zeros that are always skipped.
* An elementwise activation op (relu, leaky_relu, tanh) is performed
  iff it produces a non-zero output; zero outputs are never computed
  or stored under a sparse encoding.
* A pooling window is skipped as a whole iff every input in the window
  is zero; otherwise its full comparison/add chain runs.
* Parameter memory accesses are never skipped. Activation reads and
  writes are performed only for non-zero values.

The ratio avg/worst is the comparison metric: it is insensitive to the
cost constants and batch size, and approaches 1 as sparsity vanishes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .graph import ModelGraph, POOL_KINDS
from .tensor import Tensor

COUNT_FIELDS = ("mults_total", "mults_performed",
                "simple_ops_total", "simple_ops_performed",
                "param_accesses",
                "activation_accesses_total", "activation_accesses_performed")


@dataclass(frozen=True)
class CostConstants:
    """Energy units per operation class; only ratios of these matter."""

    mac_energy: float = 1.0
    simple_op_energy: float = 0.25
    mem_access_energy: float = 50.0

    def __post_init__(self):
        for f in ("mac_energy", "simple_op_energy", "mem_access_energy"):
            if not getattr(self, f) > 0:
                raise DomainError(f"{f} must be strictly positive")

    def scaled(self, c: float) -> "CostConstants":
        return CostConstants(self.mac_energy * c, self.simple_op_energy * c,
                             self.mem_access_energy * c)


@dataclass
class LayerEnergy:
    layer: str
    kind: str
    mults_total: int = 0
    mults_performed: int = 0
    simple_ops_total: int = 0
    simple_ops_performed: int = 0
    param_accesses: int = 0
    activation_accesses_total: int = 0
    activation_accesses_performed: int = 0
    worst_energy: float = 0.0
    avg_energy: float = 0.0

    def fill_energy(self, k: CostConstants):
        self.worst_energy = (k.mac_energy * self.mults_total
                             + k.simple_op_energy * self.simple_ops_total
                             + k.mem_access_energy * (self.param_accesses
                                                      + self.activation_accesses_total))
        self.avg_energy = (k.mac_energy * self.mults_performed
                           + k.simple_op_energy * self.simple_ops_performed
                           + k.mem_access_energy * (self.param_accesses
                                                    + self.activation_accesses_performed))


@dataclass
class EnergyReport:
    layers: list[LayerEnergy] = field(default_factory=list)
    worst_total: float = 0.0
    avg_total: float = 0.0
    ratio: float = 0.0

    def finalize(self):
        self.worst_total = math.fsum(l.worst_energy for l in self.layers)
        self.avg_total = math.fsum(l.avg_energy for l in self.layers)
        if self.worst_total <= 0:
            raise DomainError("model has zero worst-case energy")
        self.ratio = self.avg_total / self.worst_total
        return self

    def to_json(self) -> str:
        doc = {
            "ratio": self.ratio,
            "worst_total": self.worst_total,
            "avg_total": self.avg_total,
            "layers": [{"layer": l.layer, "kind": l.kind,
                        **{f: getattr(l, f) for f in COUNT_FIELDS},
                        "worst_energy": l.worst_energy, "avg_energy": l.avg_energy}
                       for l in self.layers],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "kind", *COUNT_FIELDS, "worst_energy", "avg_energy"])
            for l in self.layers:
                w.writerow([l.layer, l.kind,
                            *[getattr(l, f) for f in COUNT_FIELDS],
                            repr(l.worst_energy), repr(l.avg_energy)])


def _nnz(arr: np.ndarray) -> int:
    return int(np.count_nonzero(arr))


def _param_count(model: ModelGraph, layer) -> int:
    return sum(model.parameters[p].size for p in layer.params.values())


def _pool_window_stats(xd: np.ndarray, window: int, stride: int):
    """(total windows, windows containing any non-zero) over [b,c,h,w]."""
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    active = np.any(win != 0, axis=(4, 5))
    return int(active.size), int(np.count_nonzero(active))


def _worst_counts_for(model: ModelGraph, layer, in_shape: tuple, out_shape: tuple) -> LayerEnergy:
    kind = layer.kind
    e = LayerEnergy(layer=layer.name, kind=kind)
    in_elems = int(np.prod(in_shape))
    out_elems = int(np.prod(out_shape))
    batch = in_shape[0]
    if kind == "dense":
        w = model.param(layer, "weight")
        e.mults_total = batch * w.shape[0] * w.shape[1]
    elif kind == "conv2d":
        w = model.param(layer, "weight")
        k, c, r, s = w.shape
        e.mults_total = batch * k * c * r * s * out_shape[2] * out_shape[3]
    elif kind == "batchnorm":
        e.mults_total = in_elems          # one MAC per normalized element
    elif kind in POOL_KINDS:
        window = layer.attr("window", 2)
        e.simple_ops_total = out_elems * window * window
    else:                                  # relu / leaky_relu / tanh
        e.simple_ops_total = out_elems
    e.param_accesses = _param_count(model, layer)
    e.activation_accesses_total = in_elems + out_elems
    return e


def _performed_counts(model: ModelGraph, layer, xd: np.ndarray, yd: np.ndarray,
                      e: LayerEnergy):
    kind = layer.kind
    if kind == "dense":
        e.mults_performed = _nnz(xd) * model.param(layer, "weight").shape[0]
    elif kind == "conv2d":
        w = model.param(layer, "weight")
        k, c, r, s = w.shape
        stride, padding = layer.attr("stride", 1), layer.attr("padding", 0)
        xp = xd
        if padding:
            xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (r, s), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        e.mults_performed = k * _nnz(win)
    elif kind == "batchnorm":
        e.mults_performed = _nnz(xd)
    elif kind in POOL_KINDS:
        window = layer.attr("window", 2)
        stride = layer.attr("stride", window)
        _, active = _pool_window_stats(xd, window, stride)
        e.simple_ops_performed = active * window * window
    else:
        e.simple_ops_performed = _nnz(yd)
    e.activation_accesses_performed = _nnz(xd) + _nnz(yd)


def _report(model: ModelGraph, batch_input: Tensor, constants: CostConstants) -> EnergyReport:
    trace = model.forward_trace(batch_input)
    report = EnergyReport()
    for layer, inp, out in trace:
        e = _worst_counts_for(model, layer, inp.shape, out.shape)
        _performed_counts(model, layer, inp.data, out.data, e)
        e.fill_energy(constants)
        report.layers.append(e)
    return report.finalize()


# ---------------------------------------------------------------------------
# public operations


def count_worst_case(model: ModelGraph, input_shape: tuple, batch: int) -> list[LayerEnergy]:
    """Per-layer op and memory totals for a dense (no-skipping) pass."""
    shapes = model.output_shapes(batch=batch)
    in_shape = (batch,) + tuple(input_shape)
    out = []
    for layer, out_shape in zip(model.layers, shapes):
        eff_in = in_shape
        if layer.kind == "dense" and len(in_shape) > 2:
            eff_in = (in_shape[0], int(np.prod(in_shape[1:])))
        out.append(_worst_counts_for(model, layer, eff_in, out_shape))
        in_shape = out_shape
    return out


def count_average_case(model: ModelGraph, batch_input: Tensor) -> list[LayerEnergy]:
    """Per-layer performed counts for an actual forward pass."""
    return _report(model, batch_input, CostConstants()).layers


def energy_ratio(model: ModelGraph, batch_input: Tensor,
                 constants: CostConstants | None = None) -> tuple[float, EnergyReport]:
    """Average-case over worst-case energy for one input batch."""
    report = _report(model, batch_input, constants or CostConstants())
    return report.ratio, report


def mean_energy_ratio(model: ModelGraph, dataset,
                      constants: CostConstants | None = None) -> float:
    """Mean per-batch energy ratio over a dataset; order-independent."""
    batches = list(dataset.batches)
    if not batches:
        raise DomainError("mean_energy_ratio: empty dataset")
    constants = constants or CostConstants()
    # fsum is exact, so the mean is invariant to batch order
    ratios = [energy_ratio(model, b, constants)[0] for b in batches]
    return math.fsum(ratios) / len(ratios)


def ratio_increase(clean_ratio: float, attacked_ratio: float) -> float:
    """Percentage increase of the attacked ratio over the clean ratio."""
    if not 0 < clean_ratio <= 1:
        raise DomainError(f"clean ratio {clean_ratio} outside (0, 1]")
    if not 0 < attacked_ratio <= 1:
        raise DomainError(f"attacked ratio {attacked_ratio} outside (0, 1]")
    return 100.0 * (attacked_ratio - clean_ratio) / clean_ratio
