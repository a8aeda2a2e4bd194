"""Reverse-mode differentiation over float64 numpy arrays.

Only the primitives the EIIE policies and the batch reward need are here:
height-1 row convolution, ReLU/tanh/sigmoid, elementwise arithmetic with
numpy broadcasting, matmul, concatenation, a softmax with a prepended bias
slot, log/abs, and sum/mean reductions.  Each op records its parents and a
closure that pushes the upstream gradient back into them; ``backward``
walks the recorded tape in reverse topological order.
"""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from portfolio_rl.errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Adam",
    "backward",
    "conv_rows",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "absolute",
    "matmul",
    "concat",
    "softmax_with_bias",
    "tsum",
    "mean",
    "rnn_cell",
    "lstm_cell",
    "l2_penalty",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """A node on the tape.  Leaves with ``requires_grad`` are parameters."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    # make ndarray <op> Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _neg(_lift(other)))

    def __rsub__(self, other):
        return _add(_lift(other), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _lift(other))

    def __rtruediv__(self, other):
        return _div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        return _reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return _transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], back) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------
def _add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, "add", (a, b), back)


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, "neg", (a,), lambda g: _accumulate(a, -g))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, "mul", (a, b), back)


def _div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out_data / b.data, b.shape))

    return _node(out_data, "div", (a, b), back)


def relu(x: Tensor) -> Tensor:
    # derivative at the kink is taken as 0
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: _accumulate(x, g * mask))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, "tanh", (x,), lambda g: _accumulate(x, g * (1.0 - y * y)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, "sigmoid", (x,), lambda g: _accumulate(x, g * y * (1.0 - y)))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")
    return _node(np.log(x.data), "log", (x,), lambda g: _accumulate(x, g / x.data))


def absolute(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), "abs", (x,), lambda g: _accumulate(x, g * np.sign(x.data)))


# shape ops ------------------------------------------------------------------
def _getitem(x: Tensor, index) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        _accumulate(x, full)

    return _node(x.data[index], "getitem", (x,), back)


def _reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), "reshape", (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def _transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), "transpose", (x,), lambda g: _accumulate(x, g.transpose(inverse)))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: cannot join {t.shape} to {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=ax))

    return _node(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, back)


# reductions -----------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis=axis) * (1.0 / count)


# linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: expected (..., k) @ (k, ...), got {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, "matmul", (a, b), back)


def conv_rows(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid convolution along the last axis with a 1 x k receptive field.

    ``x`` is (batch, in_maps, rows, width); ``kernel`` is (out_maps, in_maps, k).
    Rows never mix, so every asset row is processed by the same filters.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_rows: input must be 4-d (batch, maps, rows, width), got {x.shape}")
    if kernel.data.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv_rows: kernel {kernel.shape} does not match input maps {x.shape[1]}")
    k = kernel.shape[2]
    width = x.shape[3]
    if k > width:
        raise ShapeError(f"conv_rows: kernel width {k} exceeds input width {width}")
    out_w = width - k + 1
    batch, maps, rows, _ = x.shape
    out_maps = kernel.shape[0]
    # im2col: one row per (batch, asset row, output position)
    cols = sliding_window_view(x.data, k, axis=3).transpose(0, 2, 3, 1, 4).reshape(batch * rows * out_w, maps * k)
    k2 = kernel.data.reshape(out_maps, maps * k)
    out = (cols @ k2.T).reshape(batch, rows, out_w, out_maps).transpose(0, 3, 1, 2)
    parents = [x, kernel]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(batch * rows * out_w, out_maps)
        if kernel.requires_grad:
            _accumulate(kernel, (g2.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            gwin = (g2 @ k2).reshape(batch, rows, out_w, maps, k).transpose(0, 3, 1, 2, 4)
            gx = np.zeros_like(x.data)
            if out_w <= k:
                for pos in range(out_w):
                    gx[..., pos:pos + k] += gwin[..., pos, :]
            else:
                for j in range(k):
                    gx[..., j:j + out_w] += gwin[..., j]
            _accumulate(x, gx)

    return _node(out, "conv_rows", parents, back)


def softmax_with_bias(scores: Tensor, bias: Tensor) -> Tensor:
    """Softmax over ``[bias, scores...]`` along the last axis; the bias slot comes first."""
    if scores.data.ndim != 2:
        raise ShapeError(f"softmax_with_bias: scores must be (batch, assets), got {scores.shape}")
    if bias.data.size != 1:
        raise ShapeError(f"softmax_with_bias: bias must be a scalar, got {bias.shape}")
    batch = scores.shape[0]
    z = np.concatenate([np.full((batch, 1), bias.data.reshape(())), scores.data], axis=1)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        gz = s * (g - (g * s).sum(axis=1, keepdims=True))
        _accumulate(bias, gz[:, :1].sum().reshape(bias.shape))
        _accumulate(scores, gz[:, 1:])

    return _node(s, "softmax_with_bias", (scores, bias), back)


# recurrent cells --------------------------------------------------------------
def rnn_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """h' = tanh(x W_x + h W_h + b)."""
    return tanh(matmul(x, w_x) + matmul(h, w_h) + b)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Standard LSTM step; gate columns are ordered (input, forget, candidate, output)."""
    size = h.shape[-1]
    z = matmul(x, w_x) + matmul(h, w_h) + b
    i = sigmoid(z[:, 0:size])
    f = sigmoid(z[:, size:2 * size])
    g = tanh(z[:, 2 * size:3 * size])
    o = sigmoid(z[:, 3 * size:4 * size])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


# driver -----------------------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(output: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate d(output)/d(node) through the tape.

    ``output`` must hold a single value.  When ``params`` is given their
    gradients are reset first and returned; parameters the output does not
    depend on get exact zeros.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward: target must be scalar, got shape {output.shape}")
    if params is not None:
        for p in params.values():
            p.grad = None
    order = _topological(output)
    for node in order:
        if node._backward is not None:
            node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return {}
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


# optimisation -------------------------------------------------------------------
class Adam:
    """Adam with bias correction.  ``ascend=True`` climbs the objective."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, ascend: bool = False):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.ascend = ascend
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        sign = 1.0 if self.ascend else -1.0
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data += sign * self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.t)])}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name].copy()
            out[f"adam.v.{name}"] = self.v[name].copy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.step"][0])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}


def l2_penalty(weights: Iterable[Tensor], coefficient: float) -> Tensor:
    """coefficient * sum of squares; pass weight tensors only, never biases."""
    if coefficient < 0:
        raise ValueError("L2 coefficient must be non-negative")
    total = Tensor(0.0)
    for w in weights:
        total = total + tsum(w * w)
    return total * coefficient


# checkpoints --------------------------------------------------------------------
_MAGIC = b"TGCKPT1\n"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 tensors: a text header line per tensor then raw LE bytes."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for name in sorted(tensors):
            if any(ch.isspace() for ch in name):
                raise ValueError(f"tensor name may not contain whitespace: {name!r}")
            arr = np.asarray(tensors[name], dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}".rstrip().encode() + b"\n")
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        while True:
            header = fh.readline()
            if not header:
                break
            parts = header.decode().split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return out

