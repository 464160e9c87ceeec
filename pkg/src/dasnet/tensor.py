"""Minimal dense tensors with reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output records its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` walks the recorded graph once, in a fixed
topological order, so gradients are bit-reproducible.

Activations are float32. Scalar losses are reduced in float64 and kept in
float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


@contextmanager
def precision(dtype):
    """Temporarily switch the activation dtype, e.g. to float64 for deep gradient checks.

    Only tensors and parameters created inside the block use the new dtype.
    """
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype != np.float64 or arr.ndim != 0:
            arr = arr.astype(DTYPE, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Graph traversal

@dataclass
class Graph:
    """Nodes reachable from a root, parents before children."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; parents are visited in their recorded order
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> Graph:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.from_root(loss)
    if not loss.requires_grad:
        return graph
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # leaf: accumulate into the persistent buffer
            g = np.asarray(g, dtype=DTYPE)
            if g.shape != node.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match leaf shape {node.shape}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg
    return graph


# --------------------------------------------------------------------------
# Elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = DTYPE(s)
    return _node(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, DTYPE(0)), (x,), lambda g: (g * keep,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    _check_same_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a), "maximum")


def softmax_over_channels(x: Tensor) -> Tensor:
    """Softmax along axis 1 of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"softmax_over_channels expects NCHW, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (x,), back, "softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: N,H,W mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit input {x.shape}")
    out = x.data + bias.data[None, :, None, None]
    return _node(out, (x, bias), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")


def mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero entries where ``keep`` is False; the backward pass applies the same mask."""
    if keep.shape != x.shape:
        raise ShapeError(f"mask: mask {keep.shape} vs input {x.shape}")
    keep = keep.astype(bool, copy=False)
    return _node(np.where(keep, x.data, DTYPE(0)), (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),), "mask")


def channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Channels ``lo:hi`` of an NCHW tensor."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, lo:hi] = g
        return (out,)

    return _node(np.ascontiguousarray(x.data[:, lo:hi]), (x,), back, "channel_slice")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def gather(x: Tensor, flat_index: np.ndarray) -> Tensor:
    """Pick ``x.ravel()[flat_index]``; pure data movement, no arithmetic."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    size = x.data.size
    orig = x.shape

    def back(g):
        out = np.zeros(size, dtype=g.dtype)
        np.add.at(out, flat_index.ravel(), g.ravel())
        return (out.reshape(orig),)

    return _node(x.data.reshape(-1)[flat_index], (x,), back, "gather")


def segment_mean(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of 1-d ``x`` over each segment id in ``[0, num_segments)``; empty segments give 0."""
    if x.data.ndim != 1 or segment_ids.shape != x.shape:
        raise ShapeError(f"segment_mean: values {x.shape} vs ids {segment_ids.shape}")
    ids = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(ids, minlength=num_segments).astype(np.float64)
    sums = np.bincount(ids, weights=x.data.astype(np.float64), minlength=num_segments)
    out = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)

    def back(g):
        return ((g / np.maximum(counts, 1))[ids].astype(DTYPE),)

    return _node(out.astype(DTYPE), (x,), back, "segment_mean")


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    for x in xs[1:]:
        _check_same_shape(xs[0], x, "stack")
    out = np.stack([x.data for x in xs])
    return _node(out, tuple(xs), lambda g: tuple(g[i] for i in range(len(xs))), "stack")


def slice_batch(x: Tensor, index: int) -> Tensor:
    """Item ``index`` of the leading axis, keeping the axis (shape 1×...)."""
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index:index + 1] = g
        return (out,)

    return _node(x.data[index:index + 1], (x,), back, "slice")


# --------------------------------------------------------------------------
# Reductions

def sum_all(x: Tensor) -> Tensor:
    total = np.float64(x.data.sum(dtype=np.float64))
    shape = x.shape
    return _node(total, (x,), lambda g: (np.full(shape, g, dtype=DTYPE),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    total = np.float64(x.data.sum(dtype=np.float64) / n)
    shape = x.shape
    return _node(total, (x,), lambda g: (np.full(shape, g / n, dtype=DTYPE),), "mean")


def add_scalars(*xs: Tensor) -> Tensor:
    for x in xs:
        if x.data.ndim != 0:
            raise ShapeError(f"add_scalars expects 0-d tensors, got {x.shape}")
    total = np.float64(sum(float(x.data) for x in xs))
    return _node(total, xs, lambda g: tuple(g for _ in xs), "add_scalars")


def scale_scalar(x: Tensor, s: float) -> Tensor:
    return _node(np.float64(float(x.data) * s), (x,), lambda g: (g * s,), "scale_scalar")


# --------------------------------------------------------------------------
# Fused losses (float64 accumulation)

def _log_softmax64(logits: np.ndarray, axis: int) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, weight: np.ndarray,
                          normalizer: float) -> Tensor:
    """``sum(weight * CE(softmax(logits, axis=1), target)) / normalizer``.

    ``logits`` is N×K×... with class on axis 1; ``target`` and ``weight`` have the
    logits shape minus axis 1. Zero-weight positions get exactly zero gradient.
    """
    if target.shape != logits.shape[:1] + logits.shape[2:] or weight.shape != target.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, target {target.shape}, "
                         f"weight {weight.shape}")
    logp = _log_softmax64(logits.data, axis=1)
    tgt = np.expand_dims(target.astype(np.intp), 1)
    w = weight.astype(np.float64)
    nll = -np.take_along_axis(logp, tgt, axis=1)[:, 0]
    total = np.float64((w * nll).sum() / normalizer)

    def back(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, tgt, 1.0, axis=1)
        grad = (grad - onehot) * np.expand_dims(w, 1) * (float(g) / normalizer)
        return (grad.astype(DTYPE),)

    return _node(total, (logits,), back, "softmax_ce")


def sigmoid_cross_entropy(logits: Tensor, target: np.ndarray, normalizer: float) -> Tensor:
    """``sum(BCE(sigmoid(logits), target)) / normalizer`` in float64."""
    if target.shape != logits.shape:
        raise ShapeError(f"sigmoid_cross_entropy: logits {logits.shape} vs target {target.shape}")
    z = logits.data.astype(np.float64)
    t = target.astype(np.float64)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    total = np.float64(loss.sum() / normalizer)

    def back(g):
        return (((_stable_sigmoid(z) - t) * (float(g) / normalizer)).astype(DTYPE),)

    return _node(total, (logits,), back, "sigmoid_ce")


def smooth_l1(pred: Tensor, target: np.ndarray, weight: np.ndarray, normalizer: float,
              beta: float = 1.0) -> Tensor:
    """Weighted Huber loss with transition at ``beta``."""
    if target.shape != pred.shape or weight.shape != pred.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape}, target {target.shape}, weight {weight.shape}")
    d = pred.data.astype(np.float64) - target
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    w = weight.astype(np.float64)
    total = np.float64((w * loss).sum() / normalizer)

    def back(g):
        dl = np.where(ad < beta, d / beta, np.sign(d))
        return ((dl * w * (float(g) / normalizer)).astype(DTYPE),)

    return _node(total, (pred,), back, "smooth_l1")


# --------------------------------------------------------------------------
# Convolutions

def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """N×C×Ho×Wo×K×K view over the zero-padded input."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    if k == 1 and stride == 1 and pad == 0:
        return np.einsum("nchw,oc->nohw", x, w[:, :, 0, 0], optimize=True)
    win = _windows(x, k, stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Scatter ``g`` (N×O×Ho×Wo) back onto an N×I×H×W input through ``w`` (O×I×K×K)."""
    n, _, ho, wo = g.shape
    _, c, k, _ = w.shape
    h, wd = in_hw
    if k == 1 and stride == 1 and pad == 0:
        return np.einsum("nohw,oc->nchw", g, w[:, :, 0, 0], optimize=True)
    # cols[n, c, kh, kw, ho, wo]
    cols = np.tensordot(w, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
    hp = max(h + 2 * pad, (ho - 1) * stride + k)
    wp = max(wd + 2 * pad, (wo - 1) * stride + k)
    out = np.zeros((n, c, hp, wp), dtype=g.dtype)
    for kh in range(k):
        for kw in range(k):
            out[:, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += cols[:, :, kh, kw]
    return out[:, :, pad:pad + h, pad:pad + wd]


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Kernel gradient O×I×K×K for input ``x`` (N×I×H×W) and upstream ``g`` (N×O×Ho×Wo)."""
    if k == 1 and stride == 1 and pad == 0:
        return np.einsum("nohw,nchw->oc", g, x, optimize=True)[:, :, None, None]
    win = _windows(x, k, stride, pad)[:, :, :g.shape[2], :g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv_args(x: Tensor, kernel: Tensor, in_channels: int, stride: int, pad: int, op: str):
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input and 4-d kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"{op}: kernel must be square, got {kernel.shape}")
    if x.shape[1] != in_channels:
        raise ShapeError(f"{op}: input {x.shape} has {x.shape[1]} channels, kernel {kernel.shape} "
                         f"expects {in_channels}")
    if stride < 1 or pad < 0:
        raise ValueError(f"{op}: need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with an O×I×K×K ``kernel``."""
    _check_conv_args(x, kernel, kernel.shape[1], stride, pad, "conv2d")
    k = kernel.shape[2]
    h, w = x.shape[2:]
    if conv_output_size(h, k, stride, pad) < 1 or conv_output_size(w, k, stride, pad) < 1:
        raise ShapeError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    out = _conv_forward(x.data, kernel.data, stride, pad)

    def back(g):
        gx = _conv_input_grad(g, kernel.data, stride, pad, (h, w)) if x.requires_grad else None
        gk = _conv_weight_grad(x.data, g, k, stride, pad) if kernel.requires_grad else None
        return gx, gk

    return _node(out, (x, kernel), back, "conv2d")


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``kernel`` is Cin×Cout×K×K (the conv's O×I layout).

    Output spatial size is ``(H - 1) * stride - 2 * pad + K``.
    """
    _check_conv_args(x, kernel, kernel.shape[0], stride, pad, "transposed_conv2d")
    k = kernel.shape[2]
    h, w = x.shape[2:]
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed_conv2d: empty output for input {x.shape}, kernel {kernel.shape}")
    out = _conv_input_grad(x.data, kernel.data, stride, pad, (ho, wo))

    def back(g):
        gx = _conv_forward(g, kernel.data, stride, pad) if x.requires_grad else None
        # g plays the conv input and x the upstream gradient; result is already Cin×Cout
        gk = _conv_weight_grad(g, x.data, k, stride, pad) if kernel.requires_grad else None
        return gx, gk

    return _node(np.ascontiguousarray(out), (x, kernel), back, "transposed_conv2d")


# --------------------------------------------------------------------------
# Parameters and optimization

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], transposed: bool = False) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for an O×I×K×K (or I×O×K×K) kernel."""
    o, i = shape[:2]
    if transposed:
        o, i = i, o
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    limit = np.sqrt(6.0 / ((i + o) * receptive))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: float) -> np.ndarray:
    """Uniform in +-sqrt(6 / fan_in); keeps activation scale through relu layers."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class ParamStore:
    """Named parameters with momentum buffers and a frozen subset.

    Iteration is always in sorted name order.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.momentum: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=DTYPE), requires_grad=True)
        self.params[name] = t
        self.momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return sorted(self.params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self.params[name]

    def freeze(self, prefix: str = "") -> None:
        for name, t in self.params.items():
            if name.startswith(prefix):
                self.frozen.add(name)
                t.requires_grad = False
                t.grad = None

    def trainable(self) -> list[str]:
        return [n for n in self.names() if n not in self.frozen]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def load_state(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(arrays)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, arr in arrays.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            cur = self.params[name]
            if cur.shape != arr.shape:
                raise ShapeError(f"parameter {name!r}: stored shape {arr.shape} vs model {cur.shape}")
            cur.data = np.array(arr, dtype=DTYPE)


def sgd_momentum_step(store: ParamStore, lr: float, momentum: float) -> None:
    """``v <- momentum * v + grad``; ``w <- w - lr * v``; grads cleared."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    names = store.trainable()
    for name in names:
        if store.params[name].grad is None:
            raise ValueError(f"trainable parameter {name!r} has no gradient")
    lr32, m32 = DTYPE(lr), DTYPE(momentum)
    for name in names:
        t = store.params[name]
        v = store.momentum[name]
        v *= m32
        v += t.grad
        t.data = t.data - lr32 * v
        t.grad = None
