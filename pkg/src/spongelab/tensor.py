"""Minimal float32 tensor engine with reverse-mode differentiation.

Tensors wrap contiguous row-major numpy arrays and are immutable after
construction. Forward ops build a graph of parent links and backward
closures; `backward(loss)` walks that graph once and returns gradients
for every named leaf. Every op validates that its output is finite:
a NaN/Inf anywhere is treated as an error state, not a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, GraphStateError, ShapeError

Array = np.ndarray


class Tensor:
    """Immutable float32 array, optionally a node in an autodiff graph.

    `name` marks a trainable leaf (a model parameter); gradients are
    collected per name by `backward`.
    """

    __slots__ = ("data", "name", "_parents", "_backward")

    def __init__(self, data, name: Optional[str] = None,
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        arr = np.array(data, dtype=np.float32, order="C")
        if not np.isfinite(arr).all():
            raise GraphStateError("tensor holds non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Arithmetic is deliberately small: elementwise same-shape add/sub/mul
    # plus scalar multiply, enough to compose losses. No broadcasting.
    def __add__(self, other: "Tensor") -> "Tensor":
        _check_same_shape(self, other, "add")
        return _op(self.data + other.data, (self, other),
                   lambda g: (g, g))

    def __sub__(self, other: "Tensor") -> "Tensor":
        _check_same_shape(self, other, "sub")
        return _op(self.data - other.data, (self, other),
                   lambda g: (g, -g))

    def __neg__(self) -> "Tensor":
        return _op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            _check_same_shape(self, other, "mul")
            a, b = self.data, other.data
            return _op(a * b, (self, other), lambda g: (g * b, g * a))
        c = float(other)
        return _op(self.data * np.float32(c), (self,), lambda g: (g * np.float32(c),))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        shape = self.shape
        return _op(np.float32(self.data.sum(dtype=np.float64)), (self,),
                   lambda g: (np.full(shape, g, dtype=np.float32),))


@dataclass(frozen=True)
class Gradient:
    """Gradient of the loss w.r.t. one named parameter."""

    parameter_id: str
    value: Tensor


def _op(data: Array, parents: tuple, backward: Callable) -> Tensor:
    return Tensor(data, _parents=parents, _backward=backward)


def _check_same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def parameter(data, name: str) -> Tensor:
    return Tensor(data, name=name)


# ---------------------------------------------------------------------------
# layer forward ops


def dense_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """out[b, o] = sum_i x[b, i] * w[o, i] + bias[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input/weight, got {x.shape}, {weight.shape}")
    out_f, in_f = weight.shape
    if x.shape[1] != in_f:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight in {in_f}")
    if bias is not None and bias.shape != (out_f,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({out_f},)")

    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    xd, wd = x.data, weight.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _op(y, parents, back)


def _conv_geometry(h, w, r, s, stride, padding):
    oh = (h + 2 * padding - r) // stride + 1
    ow = (w + 2 * padding - s) // stride + 1
    if r > h + 2 * padding or s > w + 2 * padding or oh < 1 or ow < 1:
        raise ShapeError(f"kernel {r}x{s} does not fit padded input {h + 2 * padding}x{w + 2 * padding}")
    return oh, ow


def _im2col(xd: Array, r: int, s: int, stride: int, padding: int):
    b, c, h, w = xd.shape
    oh, ow = _conv_geometry(h, w, r, s, stride, padding)
    xp = xd
    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (r, s), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # [b, c, oh, ow, r, s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * r * s)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor],
                   stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with per-output-channel bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    k, cw, r, s = weight.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")

    cols, oh, ow = _im2col(x.data, r, s, stride, padding)   # [b, oh*ow, c*r*s]
    w2 = weight.data.reshape(k, c * r * s)
    y = cols @ w2.T                                          # [b, oh*ow, k]
    if bias is not None:
        y = y + bias.data
    y = y.transpose(0, 2, 1).reshape(b, k, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(b, k, oh * ow).transpose(0, 2, 1)     # [b, oh*ow, k]
        gw = np.einsum("bik,bij->kj", g2, cols).reshape(k, c, r, s)
        dcols = g2 @ w2                                      # [b, oh*ow, c*r*s]
        d6 = dcols.reshape(b, oh, ow, c, r, s).transpose(0, 3, 1, 2, 4, 5)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((b, c, hp, wp), dtype=np.float32)
        for i in range(r):
            for j in range(s):
                dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += d6[:, :, :, :, i, j]
        gx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _op(y, parents, back)


def relu_forward(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    return _op(np.where(mask, x.data, np.float32(0.0)), (x,),
               lambda g: (g * mask,))


def leaky_relu_forward(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    a = np.float32(negative_slope)
    mask = x.data > 0
    return _op(np.where(mask, x.data, x.data * a), (x,),
               lambda g: (np.where(mask, g, g * a),))


def tanh_forward(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _op(y, (x,), lambda g: (g * (1.0 - y * y),))


def _pool_windows(xd: Array, wh: int, ww: int, stride: int):
    b, c, h, w = xd.shape
    if wh > h or ww > w:
        raise ShapeError(f"pool window {wh}x{ww} larger than input {h}x{w}")
    oh = (h - wh) // stride + 1
    ow = (w - ww) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (wh, ww), axis=(2, 3))
    return win[:, :, ::stride, ::stride], oh, ow      # [b, c, oh, ow, wh, ww]


def pool_forward(x: Tensor, kind: str, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window max or mean over [b, c, h, w] input."""
    if kind not in ("max", "avg"):
        raise DomainError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool expects 4-d input, got {x.shape}")
    stride = window if stride is None else stride
    win, oh, ow = _pool_windows(x.data, window, window, stride)
    b, c = x.shape[0], x.shape[1]
    m = window * window

    if kind == "avg":
        y = win.mean(axis=(4, 5), dtype=np.float32)

        def back_avg(g):
            dx = np.zeros(x.shape, dtype=np.float32)
            gshare = g / np.float32(m)
            for i in range(window):
                for j in range(window):
                    dx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += gshare
            return (dx,)

        return _op(y, (x,), back_avg)

    flat = win.reshape(b, c, oh, ow, m)
    idx = flat.argmax(axis=4)
    y = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def back_max(g):
        dx = np.zeros(x.shape, dtype=np.float32)
        bi, ci, oy, ox = np.indices(idx.shape)
        hi = oy * stride + idx // window
        wi = ox * stride + idx % window
        np.add.at(dx, (bi, ci, hi, wi), g)
        return (dx,)

    return _op(y, (x,), back_max)


def batchnorm_infer(x: Tensor, gamma: Tensor, beta: Tensor,
                    running_mean: Tensor, running_var: Tensor,
                    eps: float = 1e-5) -> Tensor:
    """Inference-form normalization: running stats are constants."""
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    for t, role in ((gamma, "gamma"), (beta, "beta"),
                    (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm: {role} shape {t.shape} != ({c},)")
    if np.any(running_var.data < 0):
        raise DomainError("batchnorm: negative running variance")

    cshape = (1, c) if x.data.ndim == 2 else (1, c, 1, 1)
    inv = (1.0 / np.sqrt(running_var.data.astype(np.float64) + eps)).astype(np.float32)
    xhat = (x.data - running_mean.data.reshape(cshape)) * inv.reshape(cshape)
    y = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    reduce_axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    gscaled = (gamma.data * inv).reshape(cshape)

    def back(g):
        gx = g * gscaled
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta, None, None

    return _op(y, (x, gamma, beta, running_mean, running_var), back)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: Array) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross-entropy expects 2-d logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= n:
        raise DomainError("label outside [0, num_classes)")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(np.mean(-np.log(np.maximum(p[rows, labels], 1e-30))))

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return ((g * d / np.float32(b)).astype(np.float32),)

    return _op(np.float32(loss), (logits,), back)


def mse_loss(pred: Tensor, target: Array) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target, dtype=np.float32)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: target shape {target.shape} != {pred.shape}")
    diff = pred.data - target
    n = diff.size
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return _op(np.float32(loss), (pred,),
               lambda g: ((g * 2.0 * diff / np.float32(n)).astype(np.float32),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, seed: float = 1.0) -> dict[str, Gradient]:
    """Gradients of a scalar loss for every named leaf reachable from it.

    Raises GraphStateError when `loss` is not the result of a recorded
    forward computation.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise GraphStateError("loss has no recorded forward graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {
        id(loss): np.full(loss.shape, np.float32(seed), dtype=np.float32)
    }
    named: dict[str, Gradient] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.name is not None:
            if not np.isfinite(g).all():
                raise GraphStateError(f"non-finite gradient for {node.name!r}")
            named[node.name] = Gradient(node.name, Tensor(g))
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            pg = pg.astype(np.float32, copy=False)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return named


def finite_or_raise(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise GraphStateError(f"non-finite {what}: {value}")
    return value
