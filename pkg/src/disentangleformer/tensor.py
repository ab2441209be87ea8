"""Tape-based reverse-mode autodiff over dense float64 arrays.

A Tensor wraps a numpy float64 array. Operations record nodes onto the
thread's active Tape; ``backward(loss)`` walks the tape in reverse and
accumulates gradients into ``requires_grad`` leaves. Tapes are created
eagerly and are confined to one thread; tensors themselves are immutable
values once created.

Design choices: float64 everywhere, cross-correlation convention for
convolution, exact erf-based gelu, population-variance layer norm with
eps inside the square root.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class _Node:
    """One recorded operation: inputs and a vjp closure."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; inputs of a node always precede it.

    Usable as a context manager to scope recording (e.g. one tape per
    training step). A fresh ambient tape exists per thread for casual use.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, op: str, inputs: tuple["Tensor", ...], backward_fn) -> int:
        self.nodes.append(_Node(op, inputs, backward_fn))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()


class _TapeState(threading.local):
    def __init__(self):
        self.stack = [Tape()]
        self.enabled = True


_TLS = _TapeState()


def _state() -> _TapeState:
    return _TLS


def active_tape() -> Tape:
    return _state().stack[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording within the block (forward values only)."""
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


class Tensor:
    """Dense float64 array, optionally a differentiable leaf.

    ``grad`` lazily materialises as zeros for requires_grad leaves, so
    leaves never touched by a backward pass report zero gradients.
    """

    __slots__ = ("data", "requires_grad", "_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the recorded ops below.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(out_data)
    st = _state()
    if st.enabled and any(t.requires_grad or t.node_id is not None for t in inputs):
        tape = st.stack[-1]
        out.node_id = tape.record(op, inputs, backward_fn)
        out.tape = tape
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the given input shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make("mul", ad * bd, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; trailing two axes multiply, leading axes broadcast."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", np.matmul(ad, bd), (a, b), bwd)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape)
        full[sl] = g
        return (full,)

    return _make("narrow", a.data[sl].copy(), (a,), bwd)


def pad(a: Tensor, pad_width: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding, one (before, after) pair per axis."""
    pad_width = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make("pad", np.pad(a.data, pad_width), (a,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    in_shape = a.shape
    count = 1
    for ax in axes:
        count *= in_shape[ax]
    inv = 1.0 / count

    def bwd(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * inv, in_shape).copy(),)

    return _make("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities

def unary_elementwise(kind: str, x: Tensor) -> Tensor:
    """Elementwise map. gelu is the exact Gaussian-CDF form x * Phi(x)."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x)
    raise ConfigError(f"unknown elementwise kind {kind!r}; expected relu/sigmoid/gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _make("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


# ---------------------------------------------------------------------------
# attention / normalization primitives

def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows sum to one."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), bwd)


def logsumexp_lastdim(x: Tensor) -> Tensor:
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).reshape(xd.shape[:-1])
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g, -1) * soft,)

    return _make("logsumexp", out, (x,), bwd)


def gather_lastdim(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one entry per last-axis slice; index shape == x.shape[:-1]."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} != leading shape {x.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ContractError(f"gather index out of range [0, {x.shape[-1]})")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(x.data, expanded, axis=-1).reshape(idx.shape)
    in_shape = x.shape

    def bwd(g):
        full = np.zeros(in_shape)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        return (full,)

    return _make("gather", out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit population variance,
    then apply the affine gamma, beta. eps sits inside the square root."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    gd = gamma.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv_sigma
        return dx, dgamma, dbeta

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# depthwise convolution

def _dw_unfold(x4: np.ndarray, k: int) -> np.ndarray:
    """Padded kxk neighborhoods as columns: (B, C, H*W, k*k)."""
    b, c, h, w = x4.shape
    p = (k - 1) // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-2, -1))
    return np.ascontiguousarray(view).reshape(b, c, h * w, k * k)


def _dw_xcorr(x4: np.ndarray, kd: np.ndarray) -> np.ndarray:
    """Same-padding per-channel cross-correlation on (B, C, H, W) arrays."""
    b, c, h, w = x4.shape
    k = kd.shape[-1]
    if k == 1:
        return x4 * kd.reshape(1, c, 1, 1)
    cols = _dw_unfold(x4, k)
    return np.matmul(cols, kd.reshape(c, k * k, 1)).reshape(b, c, h, w)


def _dw_kernel_grad(x4: np.ndarray, g4: np.ndarray, k: int) -> np.ndarray:
    b, c, h, w = x4.shape
    if k == 1:
        return (g4 * x4).sum(axis=(0, 2, 3)).reshape(c, 1, 1)
    cols = _dw_unfold(x4, k)
    return np.matmul(g4.reshape(b, c, 1, h * w), cols).sum(axis=0).reshape(c, k, k)


def depthwise_conv2d(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 2D cross-correlation with same zero padding.

    x: (C, H, W) or (B, C, H, W); kernels: (C, k, k) with k odd.
    """
    if kernels.ndim != 3 or kernels.shape[-1] != kernels.shape[-2]:
        raise ShapeError(f"kernels must be (C, k, k), got {kernels.shape}")
    k = kernels.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd, got {k}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"depthwise input must be (C,H,W) or (B,C,H,W), got {x.shape}")
    c = x.shape[-3]
    if kernels.shape[0] != c:
        raise ShapeError(f"kernel channels {kernels.shape[0]} != input channels {c}")
    batched = x.ndim == 4
    x4 = x.data if batched else x.data[None]
    kd = kernels.data
    out = _dw_xcorr(x4, kd)

    def bwd(g):
        g4 = g if batched else g[None]
        # dL/dx is the same cross-correlation of g with spatially flipped kernels
        dx = _dw_xcorr(g4, np.ascontiguousarray(kd[:, ::-1, ::-1]))
        dk = _dw_kernel_grad(x4, g4, k)
        return (dx if batched else dx[0]), dk

    return _make("depthwise_conv2d", out if batched else out[0], (x, kernels), bwd)


# ---------------------------------------------------------------------------
# backward pass and finite-difference oracle

def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from loss.

    Repeated calls without zero_grad accumulate. Visits each tape node at
    most once, in reverse recording order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        if loss.requires_grad:
            loss._grad = (loss.grad + 1.0) if loss._grad is not None else np.ones_like(loss.data)
        return
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            if t.node_id is not None and t.tape is tape:
                prev = grads.get(t.node_id)
                grads[t.node_id] = ig if prev is None else prev + ig
            elif t.requires_grad:
                buf = t.grad  # lazily materialises zeros
                buf += ig


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of f at x and central differences.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|).
    Intended for h in [1e-6, 1e-4] with float64 inputs.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        out = f(probe)
        if out.size != 1:
            raise ContractError(f"grad_check target must be scalar, got {out.shape}")
        backward(out)
    analytic = probe.grad.ravel().copy()

    flat = x.data.ravel()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        with Tape(), no_grad():
            f_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - h
        with Tape(), no_grad():
            f_minus = f(Tensor(bumped.reshape(x.shape))).item()
        fd[i] = (f_plus - f_minus) / (2.0 * h)

    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
