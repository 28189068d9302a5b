"""Sequential model description: layers, parameters, target selection, file I/O.

A model is an ordered chain of layers over a named parameter store. The
chain is the attack surface: sparsity layers are the ones that emit exact
zeros, and target layers are the parametric layers directly in front of
them whose bias (or normalization shift) decides how many inputs to the
sparsity layer end up positive.

Model file format (documented in README): a JSON header listing layers,
attributes and tensor locations, next to a binary blob of little-endian
float32 values. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ModelIOError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

LAYER_KINDS = ("dense", "conv2d", "relu", "leaky_relu",
               "maxpool", "avgpool", "batchnorm", "tanh")
SPARSITY_KINDS = ("relu", "maxpool", "avgpool")
POOL_KINDS = ("maxpool", "avgpool")

# parameter roles per kind; trailing '?' marks optional
_PARAM_ROLES = {
    "dense": ("weight", "bias?"),
    "conv2d": ("weight", "bias?"),
    "batchnorm": ("gamma", "beta", "running_mean", "running_var"),
}

# role holding the bias-like vector that SkipSponge manipulates
BIAS_ROLE = {"dense": "bias", "conv2d": "bias", "batchnorm": "beta"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)   # role -> tensor name

    def attr(self, key, default=None):
        return self.attrs.get(key, default)


class ModelGraph:
    """Ordered layer chain plus its parameter tensors."""

    def __init__(self, layers: list[LayerSpec], parameters: dict[str, Tensor],
                 input_shape: tuple):
        self.layers = list(layers)
        self.parameters = dict(parameters)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.validate()

    # -- structure ---------------------------------------------------------

    def validate(self):
        names = [l.name for l in self.layers]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate layer names in model")
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            roles = _PARAM_ROLES.get(layer.kind, ())
            for role in roles:
                optional = role.endswith("?")
                role = role.rstrip("?")
                pname = layer.params.get(role)
                if pname is None:
                    if not optional:
                        raise ConfigError(f"layer {layer.name!r}: missing {role} parameter")
                    continue
                if pname not in self.parameters:
                    raise ConfigError(f"layer {layer.name!r}: parameter {pname!r} not in store")
        self.output_shapes()   # raises ShapeError if the chain is inconsistent

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def param(self, layer: LayerSpec, role: str) -> Tensor | None:
        pname = layer.params.get(role)
        return self.parameters[pname] if pname is not None else None

    def bias_param_name(self, layer_name: str) -> str | None:
        """Name of the layer's bias-like tensor, if it has one."""
        layer = self.layer(layer_name)
        role = BIAS_ROLE.get(layer.kind)
        if role is None:
            return None
        return layer.params.get(role)

    def set_parameter(self, name: str, values: np.ndarray):
        if name not in self.parameters:
            raise KeyError(name)
        old = self.parameters[name]
        arr = np.asarray(values, dtype=np.float32)
        if arr.shape != old.shape:
            raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {old.shape}")
        self.parameters[name] = Tensor(arr, name=name)

    def clone(self) -> "ModelGraph":
        params = {n: Tensor(t.data, name=n) for n, t in self.parameters.items()}
        return ModelGraph(self.layers, params, self.input_shape)

    def param_sizes(self) -> dict[str, int]:
        return {n: t.size for n, t in self.parameters.items()}

    # -- shape inference ----------------------------------------------------

    def output_shapes(self, batch: int = 1) -> list[tuple]:
        """Per-layer output shapes for a given batch size."""
        shape = (batch,) + self.input_shape
        shapes = []
        for layer in self.layers:
            shape = self._infer_one(layer, shape)
            shapes.append(shape)
        return shapes

    def _infer_one(self, layer: LayerSpec, shape: tuple) -> tuple:
        kind = layer.kind
        try:
            if kind == "dense":
                w = self.param(layer, "weight")
                flat = int(np.prod(shape[1:]))
                if w.shape[1] != flat:
                    raise ShapeError(f"weight expects {w.shape[1]} inputs, chain provides {flat}")
                return (shape[0], w.shape[0])
            if kind == "conv2d":
                if len(shape) != 4:
                    raise ShapeError(f"conv2d needs 4-d input, chain provides {shape}")
                w = self.param(layer, "weight")
                k, c, r, s = w.shape
                if c != shape[1]:
                    raise ShapeError(f"weight expects {c} channels, chain provides {shape[1]}")
                oh, ow = T._conv_geometry(shape[2], shape[3], r, s,
                                          layer.attr("stride", 1), layer.attr("padding", 0))
                return (shape[0], k, oh, ow)
            if kind in POOL_KINDS:
                if len(shape) != 4:
                    raise ShapeError(f"pool needs 4-d input, chain provides {shape}")
                window = layer.attr("window", 2)
                stride = layer.attr("stride", window)
                if window > shape[2] or window > shape[3]:
                    raise ShapeError(f"window {window} larger than input {shape[2]}x{shape[3]}")
                oh = (shape[2] - window) // stride + 1
                ow = (shape[3] - window) // stride + 1
                return (shape[0], shape[1], oh, ow)
            if kind == "batchnorm":
                g = self.param(layer, "gamma")
                if g.shape[0] != shape[1]:
                    raise ShapeError(f"gamma has {g.shape[0]} channels, chain provides {shape[1]}")
                return shape
            return shape   # relu / leaky_relu / tanh
        except ShapeError as e:
            raise ShapeError(f"layer {layer.name!r}: {e}") from None

    # -- execution -----------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        act = x
        for layer in self.layers:
            act = self._apply(layer, act)
        return act

    def forward_trace(self, x: Tensor) -> list[tuple[LayerSpec, Tensor, Tensor]]:
        """Run the chain, returning (layer, input, output) per layer.

        The recorded input is the tensor the layer actually consumed
        (for dense layers fed 4-d activations, the flattened view).
        """
        act = x
        trace = []
        for layer in self.layers:
            inp = self._coerce(layer, act)
            out = self._apply(layer, inp, coerced=True)
            trace.append((layer, inp, out))
            act = out
        return trace

    def _coerce(self, layer: LayerSpec, act: Tensor) -> Tensor:
        if layer.kind == "dense" and act.data.ndim > 2:
            return T.reshape(act, (act.shape[0], -1))
        return act

    def _apply(self, layer: LayerSpec, act: Tensor, coerced: bool = False) -> Tensor:
        if not coerced:
            act = self._coerce(layer, act)
        kind = layer.kind
        try:
            if kind == "dense":
                return T.dense_forward(act, self.param(layer, "weight"),
                                       self.param(layer, "bias"))
            if kind == "conv2d":
                return T.conv2d_forward(act, self.param(layer, "weight"),
                                        self.param(layer, "bias"),
                                        stride=layer.attr("stride", 1),
                                        padding=layer.attr("padding", 0))
            if kind == "relu":
                return T.relu_forward(act)
            if kind == "leaky_relu":
                return T.leaky_relu_forward(act, layer.attr("negative_slope", 0.01))
            if kind == "maxpool":
                return T.pool_forward(act, "max", layer.attr("window", 2),
                                      layer.attr("stride", layer.attr("window", 2)))
            if kind == "avgpool":
                return T.pool_forward(act, "avg", layer.attr("window", 2),
                                      layer.attr("stride", layer.attr("window", 2)))
            if kind == "batchnorm":
                return T.batchnorm_infer(act, self.param(layer, "gamma"),
                                         self.param(layer, "beta"),
                                         self.param(layer, "running_mean"),
                                         self.param(layer, "running_var"),
                                         eps=layer.attr("eps", 1e-5))
            if kind == "tanh":
                return T.tanh_forward(act)
        except ShapeError as e:
            raise ShapeError(f"layer {layer.name!r}: {e}") from None
        raise ConfigError(f"layer {layer.name!r}: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# attack-surface selection


def identify_sparsity_layers(model: ModelGraph) -> list[str]:
    """Layers whose outputs contain exact zeros for zero-skipping.

    Pooling layers directly following a ReLU are dropped: the zeros the
    attack creates at the ReLU already propagate through the pool, so
    only the ReLU needs attention there.
    """
    out = []
    for i, layer in enumerate(model.layers):
        if layer.kind not in SPARSITY_KINDS:
            continue
        if layer.kind in POOL_KINDS and i > 0 and model.layers[i - 1].kind == "relu":
            continue
        out.append(layer.name)
    return out


@dataclass(frozen=True)
class TargetLayerSet:
    """(target layer, sparsity layer) pairs in forward order."""

    pairs: tuple

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def target_names(self) -> list[str]:
        return [t for t, _ in self.pairs]


def identify_target_layers(model: ModelGraph) -> TargetLayerSet:
    """For each sparsity layer, the directly preceding bias-holding layer.

    Sparsity layers whose predecessor has no bias-like parameter are
    reported and skipped.
    """
    pairs = []
    for sname in identify_sparsity_layers(model):
        idx = model.layer_index(sname)
        if idx == 0:
            log.warning("sparsity layer %r has no preceding layer; skipped", sname)
            continue
        prev = model.layers[idx - 1]
        if model.bias_param_name(prev.name) is None:
            log.warning("sparsity layer %r: predecessor %r has no bias parameter; skipped",
                        sname, prev.name)
            continue
        pairs.append((prev.name, sname))
    return TargetLayerSet(tuple(pairs))


# ---------------------------------------------------------------------------
# construction from an architecture description


def build_model(spec: dict, seed: int = 0) -> ModelGraph:
    """Construct a model from a JSON-friendly architecture description.

    Layer entries name their kind plus sizing attributes (dense: units;
    conv2d: filters, kernel, stride, padding; pools: window, stride).
    Weights use scaled-normal init from `seed`; biases start at zero.
    """
    rng = np.random.default_rng(seed)
    if "input_shape" not in spec or "layers" not in spec:
        raise ConfigError("model spec needs 'input_shape' and 'layers'")
    input_shape = tuple(int(d) for d in spec["input_shape"])
    shape = (1,) + input_shape
    layers = []
    params: dict[str, Tensor] = {}

    def add_param(name, arr):
        params[name] = Tensor(arr.astype(np.float32), name=name)

    for i, entry in enumerate(spec["layers"]):
        kind = entry.get("kind")
        name = entry.get("name", f"{kind}{i}")
        if kind not in LAYER_KINDS:
            raise ConfigError(f"layer {name!r}: unknown kind {kind!r}")
        attrs, proles = {}, {}
        if kind == "dense":
            units = int(entry["units"])
            fan_in = int(np.prod(shape[1:]))
            add_param(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (units, fan_in)))
            proles["weight"] = f"{name}.weight"
            if entry.get("bias", True):
                add_param(f"{name}.bias", np.zeros(units))
                proles["bias"] = f"{name}.bias"
            shape = (1, units)
        elif kind == "conv2d":
            k = int(entry["filters"])
            r = int(entry.get("kernel", 3))
            attrs = {"stride": int(entry.get("stride", 1)),
                     "padding": int(entry.get("padding", 0))}
            c = shape[1]
            fan_in = c * r * r
            add_param(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (k, c, r, r)))
            proles["weight"] = f"{name}.weight"
            if entry.get("bias", True):
                add_param(f"{name}.bias", np.zeros(k))
                proles["bias"] = f"{name}.bias"
            oh, ow = T._conv_geometry(shape[2], shape[3], r, r, attrs["stride"], attrs["padding"])
            shape = (1, k, oh, ow)
        elif kind in POOL_KINDS:
            w = int(entry.get("window", 2))
            attrs = {"window": w, "stride": int(entry.get("stride", w))}
            oh = (shape[2] - w) // attrs["stride"] + 1
            ow = (shape[3] - w) // attrs["stride"] + 1
            shape = (shape[0], shape[1], oh, ow)
        elif kind == "batchnorm":
            c = shape[1]
            attrs = {"eps": float(entry.get("eps", 1e-5))}
            add_param(f"{name}.gamma", np.ones(c))
            add_param(f"{name}.beta", np.zeros(c))
            add_param(f"{name}.running_mean", np.zeros(c))
            add_param(f"{name}.running_var", np.ones(c))
            proles = {r: f"{name}.{r}" for r in ("gamma", "beta", "running_mean", "running_var")}
        elif kind == "leaky_relu":
            attrs = {"negative_slope": float(entry.get("negative_slope", 0.01))}
        layers.append(LayerSpec(name=name, kind=kind, attrs=attrs, params=proles))

    return ModelGraph(layers, params, input_shape)


# ---------------------------------------------------------------------------
# serialization

_FORMAT = "spongelab-model"
_VERSION = 1


def _blob_path(header_path: str) -> str:
    stem, _ = os.path.splitext(header_path)
    return stem + ".bin"


def save_model(model: ModelGraph, path: str):
    """Write the JSON header to `path` and float32 blob beside it."""
    order = sorted(model.parameters)
    chunks, tensors = [], {}
    offset = 0
    for name in order:
        arr = model.parameters[name].data
        raw = arr.astype("<f4").tobytes()
        tensors[name] = {"shape": list(arr.shape), "offset": offset, "length": arr.size}
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "format": _FORMAT,
        "version": _VERSION,
        "input_shape": list(model.input_shape),
        "layers": [{"name": l.name, "kind": l.kind, "attrs": l.attrs, "params": l.params}
                   for l in model.layers],
        "tensors": tensors,
        "blob": os.path.basename(_blob_path(path)),
        "blob_crc32": zlib.crc32(blob),
    }
    with open(_blob_path(path), "wb") as f:
        f.write(blob)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=1, sort_keys=True)
        f.write("\n")


def load_model(path: str) -> ModelGraph:
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ModelIOError(f"cannot read model header {path!r}: {e}") from None
    for key in ("format", "version", "input_shape", "layers", "tensors", "blob", "blob_crc32"):
        if key not in header:
            raise ModelIOError(f"model header {path!r}: missing {key!r}")
    if header["format"] != _FORMAT:
        raise ModelIOError(f"model header {path!r}: not a {_FORMAT} file")

    blob_path = os.path.join(os.path.dirname(path) or ".", header["blob"])
    try:
        with open(blob_path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise ModelIOError(f"cannot read model blob {blob_path!r}: {e}") from None
    if zlib.crc32(blob) != header["blob_crc32"]:
        raise ModelIOError(f"model blob {blob_path!r}: checksum mismatch")

    params = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(meta["length"])
        if count != int(np.prod(shape, dtype=np.int64)):
            raise ModelIOError(f"tensor {name!r}: length {count} != prod{shape}")
        start, end = int(meta["offset"]), int(meta["offset"]) + 4 * count
        if end > len(blob):
            raise ModelIOError(f"tensor {name!r}: blob truncated at offset {start}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        params[name] = Tensor(arr, name=name)

    layers = [LayerSpec(name=l["name"], kind=l["kind"],
                        attrs=dict(l.get("attrs", {})), params=dict(l.get("params", {})))
              for l in header["layers"]]
    try:
        return ModelGraph(layers, params, tuple(header["input_shape"]))
    except (ConfigError, ShapeError) as e:
        raise ModelIOError(f"model {path!r} is inconsistent: {e}") from None
