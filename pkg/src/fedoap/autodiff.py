"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tape` records every primitive applied to tensors that require
gradients; `Tape.backward` replays it in reverse.  Tensors are plain
numpy arrays plus an optional tape reference, so constants and
detached values carry no graph state at all.

Broadcasting is deliberately narrow: elementwise ops accept equal
shapes, or one operand whose shape is a trailing suffix of the other
(leading-axis expansion).  Anything fancier raises ShapeMismatch.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DetachedRoot,
    NonFiniteValue,
    NonScalarRoot,
    ShapeMismatch,
)


def _as_f64(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"non-finite value produced by {context}")


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.values = _as_f64(values)
        _check_finite(self.values, "tensor construction")
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are accepted on either side
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("kind", "parents", "backward_fn")

    def __init__(self, kind: str, parents: tuple, backward_fn):
        self.kind = kind
        self.parents = parents
        self.backward_fn = backward_fn


class Gradients:
    """Result of a backward pass: node id -> gradient array."""

    def __init__(self, tape: "Tape", grads: dict):
        self._tape = tape
        self._grads = grads

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Gradient for a tensor on this tape; zeros if disconnected."""
        if tensor.tape is not self._tape or tensor.node_id is None:
            raise DetachedRoot("tensor is not recorded on this tape")
        g = self._grads.get(tensor.node_id)
        if g is None:
            return np.zeros(tensor.shape, dtype=np.float64)
        return g


class Tape:
    """Append-only record of primitive applications.

    A tape is confined to a single worker; nodes are stored in
    topological order by construction.  backward() consumes the tape:
    the recorded graph (and the activation buffers its closures hold)
    is released as soon as the gradient map is built, so peak memory
    per training step does not depend on garbage-collector timing.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._released = False

    def _record(self, kind: str, parents: tuple, backward_fn) -> int:
        if self._released:
            raise DetachedRoot("tape was already consumed by a backward pass")
        self.nodes.append(_Node(kind, parents, backward_fn))
        return len(self.nodes) - 1

    def leaf(self, values) -> Tensor:
        """Watch an array as a differentiable leaf."""
        node_id = self._record("leaf", (), None)
        return Tensor(values, tape=self, node_id=node_id)

    def backward(self, root: Tensor) -> Gradients:
        if self._released:
            raise DetachedRoot("tape was already consumed by a backward pass")
        if root.tape is not self or root.node_id is None:
            raise DetachedRoot("backward root is not recorded on this tape")
        if root.values.size != 1:
            raise NonScalarRoot(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {
            root.node_id: np.ones_like(root.values)
        }
        for node_id in range(root.node_id, -1, -1):
            grad_out = grads.get(node_id)
            if grad_out is None:
                continue
            node = self.nodes[node_id]
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(grad_out)
            for parent_id, pg in zip(node.parents, parent_grads):
                if parent_id is None or pg is None:
                    continue
                acc = grads.get(parent_id)
                # no in-place accumulate: pg may alias grad_out or a view of it
                grads[parent_id] = pg if acc is None else acc + pg
        self._released = True
        self.nodes = []
        return Gradients(self, grads)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.node_id is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _emit(kind: str, inputs: Sequence[Tensor], out_values: np.ndarray,
          backward_fn: Callable) -> Tensor:
    """Finish a primitive: finiteness check plus optional tape node.

    `backward_fn(grad_out)` must return one gradient (or None) per input,
    in order.
    """
    _check_finite(out_values, kind)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_values)
    parents = tuple(t.node_id for t in inputs)
    node_id = tape._record(kind, parents, backward_fn)
    return Tensor(out_values, tape=tape, node_id=node_id)


# --- broadcasting helpers (leading-axis expansion only) ---

def _broadcast_shapes(sa: tuple, sb: tuple, op: str) -> None:
    if sa == sb:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise ShapeMismatch(f"{op}: shapes {sa} and {sb} are not broadcastable")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "add")
    out = a.values + b.values

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", (a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "sub")
    out = a.values - b.values

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit("sub", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "mul")
    out = a.values * b.values
    av, bv = a.values, b.values

    def backward(g):
        return _reduce_to(g * bv, a.shape), _reduce_to(g * av, b.shape)

    return _emit("mul", (a, b), out, backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.values / b.values
    av, bv = a.values, b.values

    def backward(g):
        ga = _reduce_to(g / bv, a.shape)
        gb = _reduce_to(-g * av / (bv * bv), b.shape)
        return ga, gb

    return _emit("div", (a, b), out, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = a.values * factor

    def backward(g):
        return (g * factor,)

    return _emit("scale", (a,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), out, backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0.0

    def backward(g):
        return (g * mask,)

    return _emit("relu", (a,), out, backward)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # stable on both tails
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, s, 1.0 - s)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_values(a.values)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (a,), out, backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_values(x)

    def backward(g):
        return (g * sig,)

    return _emit("softplus", (a,), out, backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.values
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _emit("softmax", (a,), out, backward)


def mean_reduce(a: Tensor) -> Tensor:
    out = np.asarray(a.values.mean())
    n = a.values.size
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _emit("mean_reduce", (a,), out, backward)


def sum_reduce(a: Tensor) -> Tensor:
    """Convenience composite: full sum as mean * numel."""
    return scale(mean_reduce(a), a.values.size)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.values[index].copy()
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), out, backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.values.reshape(shape)
    orig = a.shape

    def backward(g):
        return (g.reshape(orig),)

    return _emit("reshape", (a,), out, backward)


def permute(a: Tensor, axes: tuple) -> Tensor:
    out = a.values.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _emit("permute", (a,), out, backward)


# --- convolution family ---

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Patches matrix [B*Ho*Wo, Cin*kh*kw] plus output spatial dims."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    view = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, Cin, Ho, Wo, kh, kw] -> [B, Ho, Wo, Cin, kh, kw]
    patches = view.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(patches), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: [B, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout].
    """
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeMismatch("conv2d expects 4-D input and weight")
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {bias.shape} != ({cout},)")

    patches, ho, wo = _im2col(x.values, kh, kw, stride, pad)
    w2d = weight.values.reshape(cout, -1)
    out2d = patches @ w2d.T
    if bias is not None:
        out2d += bias.values
    out = out2d.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    x_shape = x.shape

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        grad_w = (g2d.T @ patches).reshape(cout, cin, kh, kw)
        grad_patches = (g2d @ w2d).reshape(b, ho, wo, cin, kh, kw)
        hp, wp = h + 2 * pad, w + 2 * pad
        grad_xp = np.zeros((b, cin, hp, wp), dtype=np.float64)
        for di in range(kh):
            for dj in range(kw):
                grad_xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                    grad_patches[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
        grad_x = np.ascontiguousarray(grad_x)
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g2d.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", inputs, out, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution with a 2x2 kernel and stride 2 (no overlap).

    x: [B, Cin, H, W], weight: [Cin, Cout, 2, 2] -> [B, Cout, 2H, 2W].
    """
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeMismatch("conv_transpose2d expects 4-D input and weight")
    b, cin, h, w = x.shape
    cin_w, cout, kh, kw = weight.shape
    if cin != cin_w or (kh, kw) != (2, 2):
        raise ShapeMismatch(
            f"conv_transpose2d: weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch(f"conv_transpose2d: bias shape {bias.shape} != ({cout},)")

    out = np.empty((b, cout, 2 * h, 2 * w), dtype=np.float64)
    for di in range(2):
        for dj in range(2):
            piece = np.tensordot(x.values, weight.values[:, :, di, dj], axes=([1], [0]))
            out[:, :, di::2, dj::2] = piece.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.values[None, :, None, None]

    xv, wv = x.values, weight.values

    def backward(g):
        grad_x = np.zeros_like(xv)
        grad_w = np.empty_like(wv)
        for di in range(2):
            for dj in range(2):
                gs = g[:, :, di::2, dj::2]
                grad_x += np.tensordot(gs, wv[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
        for di in range(2):
            for dj in range(2):
                gs = g[:, :, di::2, dj::2]
                grad_w[:, :, di, dj] = np.tensordot(xv, gs, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv_transpose2d", inputs, out, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first window slot."""
    if x.values.ndim != 4:
        raise ShapeMismatch("maxpool2d expects a 4-D input")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.values.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(b, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((b, c, ho, wo, 4), dtype=np.float64)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        grad_x = gw.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (np.ascontiguousarray(grad_x),)

    return _emit("maxpool2d", (x,), out, backward)


# --- normalization ---

def _norm_backward(g_xhat, xhat_g, inv_std):
    """Shared whitening backward for grouped statistics.

    All arguments are [B, G, n] views; returns the gradient in the
    same layout.
    """
    mean_g = g_xhat.mean(axis=-1, keepdims=True)
    mean_gx = (g_xhat * xhat_g).mean(axis=-1, keepdims=True)
    return inv_std * (g_xhat - mean_g - xhat_g * mean_gx)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int,
               eps: float = 1e-5) -> Tensor:
    """Group normalization over [B, C, H, W] with per-channel affine."""
    if x.values.ndim != 4:
        raise ShapeMismatch("group_norm expects a 4-D input")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeMismatch(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("group_norm: affine parameters must be per-channel")

    xg = x.values.reshape(b, groups, -1)
    mean = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mean) * inv_std
    xhat = xhat_g.reshape(b, c, h, w)
    out = xhat * gamma.values[None, :, None, None] + beta.values[None, :, None, None]

    gv = gamma.values

    def backward(g):
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        g_xhat = (g * gv[None, :, None, None]).reshape(b, groups, -1)
        grad_x = _norm_backward(g_xhat, xhat_g, inv_std).reshape(b, c, h, w)
        return grad_x, grad_gamma, grad_beta

    return _emit("group_norm", (x, gamma, beta), out, backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel, per-sample normalization (group norm with C groups)."""
    if x.values.ndim != 4:
        raise ShapeMismatch("instance_norm expects a 4-D input")
    return group_norm(x, gamma, beta, groups=x.shape[1], eps=eps)
