"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable op returns a :class:`Tensor` whose ``node`` records the
inputs and a backward closure. :func:`backward` orders the reachable records
topologically (the tape) and replays them once each, in reverse.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(RuntimeError):
    """A precondition of the engine API was violated."""


_state = threading.local()
_node_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output: int = 0  # id() of the produced tensor; keys the gradient table
    id: int = field(default_factory=lambda: next(_node_ids))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def sum(self):
        return tensor_sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn, id(out))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- tape / backward


def topological_order(root: Tensor) -> list[Node]:
    """Records reachable from ``root``; inputs always precede their consumers."""
    order: list[Node] = []
    seen: set[int] = set()
    if root.node is None:
        return order
    stack: list[tuple[Node, bool]] = [(root.node, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for t in node.inputs:
            if t.node is not None and t.node.id not in seen:
                stack.append((t.node, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    With ``inputs`` given, only those leaves receive gradients; every other
    leaf keeps its ``.grad`` untouched.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the active tape (no input requires grad)")
    wanted = None if inputs is None else {id(t) for t in inputs}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.node is None:
        leaves[id(loss)] = loss
    for node in reversed(topological_order(loss)):
        out_grad = grads.pop(node.output, None)
        if out_grad is None:
            continue
        in_grads = node.backward(out_grad)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if t.node is None:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for key, t in leaves.items():
        if wanted is not None and key not in wanted:
            continue
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, "scale", (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), "relu", (x,), lambda g: (g * mask,))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor, giving NC."""
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, (n, c, h, w)).astype(g.dtype),)

    return _make(x.data.mean(axis=(2, 3)), "gap", (x,), bw)


# ---------------------------------------------------------------- convolution


def _check_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{name} must be 4-d NCHW, got shape {t.shape}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patches of an NCHW array as a (N*OH*OW, kh*kw*C) matrix, channels fastest."""
    n, c, h, w = x.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`_im2col`; returns NCHW."""
    n, c, h, w = shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))


def _wmat(w: np.ndarray) -> np.ndarray:
    """(O, C, kh, kw) -> (kh*kw*C, O) to match the im2col column order."""
    o = w.shape[0]
    return w.transpose(2, 3, 1, 0).reshape(-1, o)


def _unwmat(m: np.ndarray, shape) -> np.ndarray:
    o, c, kh, kw = shape
    return np.ascontiguousarray(m.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))


def _rows_to_nchw(m: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    return np.ascontiguousarray(m.reshape(n, oh, ow, -1).transpose(0, 3, 1, 2))


def _nchw_to_rows(g: np.ndarray) -> np.ndarray:
    return g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, cols: np.ndarray | None = None) -> np.ndarray:
    n, _, h, wd = x.shape
    _, _, kh, kw = w.shape
    if cols is None:
        cols = _im2col(x, kh, kw, stride, padding)
    oh, ow = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    return _rows_to_nchw(cols @ _wmat(w), n, oh, ow)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    _, _, kh, kw = w.shape
    dcols = _nchw_to_rows(g) @ _wmat(w).T
    return _col2im(dcols, in_shape, kh, kw, stride, padding)


def _conv_weight_grad(cols: np.ndarray, g: np.ndarray, wshape) -> np.ndarray:
    return _unwmat(cols.T @ _nchw_to_rows(g), wshape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _check_4d("input", x)
    _check_4d("weight", weight)
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    kh, kw = weight.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise DimensionError(f"kernel {weight.shape} larger than padded input {x.shape}")
    xd, wd_ = x.data, weight.data
    cols = _im2col(xd, kh, kw, stride, padding)
    out = _conv_forward(xd, wd_, stride, padding, cols)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out += bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def bw(g):
        gx = _conv_input_grad(g, wd_, xd.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(cols, g, wd_.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, "conv2d", inputs, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; weight is laid out (C_in, C_out, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + kh``. The op is the exact
    linear adjoint of :func:`conv2d` sharing weight and geometry.
    """
    _check_4d("input", x)
    _check_4d("weight", weight)
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    n, _, h, w = x.shape
    _, o, kh, kw = weight.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv_transpose2d output would be empty for input {x.shape}, weight {weight.shape}")
    xd, wd_ = x.data, weight.data
    out = _conv_input_grad(xd, wd_, (n, o, oh, ow), stride, padding)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (o,):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out += bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def bw(g):
        cols = _im2col(g, kh, kw, stride, padding)
        gx = _conv_forward(g, wd_, stride, padding, cols) if x.requires_grad else None
        # d<x, conv(g)>/dW with x playing the output-gradient role
        gw = _unwmat(cols.T @ _nchw_to_rows(xd), wd_.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, "conv_transpose2d", inputs, bw)


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Window maxima. Ties send the gradient to the first element in scan order."""
    _check_4d("input", x)
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} larger than input {x.shape}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = _windows(x.data, k, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dx[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += np.where(arg == idx, g, 0)
        return (dx,)

    return _make(np.ascontiguousarray(out), "max_pool2d", (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out (F, K)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    xd, wd_ = x.data, weight.data
    out = xd @ wd_
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def bw(g):
        grads = [g @ wd_.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, "linear", inputs, bw)


# ---------------------------------------------------------------- batch norm


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, training: bool) -> Tensor:
    """Per-channel standardization of an NCHW tensor.

    Training mode normalizes with batch statistics and folds them into
    ``state`` (unbiased variance, momentum 0.1); eval mode uses ``state``.
    """
    _check_4d("input", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    xd = x.data
    m = n * h * w
    if training:
        if m < 2:
            raise DimensionError(f"batch_norm2d needs N*H*W >= 2 in train mode, got {x.shape}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        state.mean = ((1 - mom) * state.mean + mom * mean).astype(state.mean.dtype)
        state.var = ((1 - mom) * state.var + mom * var * (m / (m - 1))).astype(state.var.dtype)
    else:
        mean, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if training:
            dx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return _make(out.astype(xd.dtype, copy=False), "batch_norm2d", (x, gamma, beta), bw)


# ---------------------------------------------------------------- losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (N, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    ld = logits.data
    z = ld - ld.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    loss = np.asarray(nll.mean(), dtype=ld.dtype)

    def bw(g):
        p = softmax(ld)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return _make(loss, "softmax_cross_entropy", (logits,), bw)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    size = diff.size
    loss = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def bw(g):
        d = diff * (2.0 * g / size)
        return d, -d

    return _make(loss, "mse", (pred, target), bw)


# ---------------------------------------------------------------- optimizer


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: list[np.ndarray] | None = None) -> None:
    """One in-place update of ``params``; clears their grads afterwards."""
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        d = g + weight_decay * p.data if weight_decay else g
        if velocity is not None:
            v = velocity[i]
            v *= momentum
            v += d
            d = v
        p.data -= (lr * d).astype(p.dtype, copy=False)
        p.grad = None
