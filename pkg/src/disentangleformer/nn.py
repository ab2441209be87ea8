"""Parameterized layers on top of the tensor core: linear, multi-head
self-attention, and the pre-norm transformer encoder layer both token paths use.

Initialization is uniform fan-in scaling (U[-sqrt(1/fan_in), sqrt(1/fan_in)])
with zero biases, deterministic given the generator. Residual-entry
projections elsewhere in the package opt into zero init so blocks start as
identity maps.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Minimal parameter container. Children are discovered from instance
    attributes in declaration order, which fixes checkpoint layout."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x W^T + b over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((out_features, in_features))
            self.init = "zeros"
        else:
            if rng is None:
                raise ConfigError("Linear needs an rng unless zero_init=True")
            w = fan_in_uniform(rng, (out_features, in_features), in_features)
            self.init = "fan_in_uniform"
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects last dim {self.in_features}, got {x.shape}")
        return T.add(T.matmul(x, T.swap_last2(self.weight)), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Standard softmax(QK^T / sqrt(d_h))V attention, no mask, no position bias.

    Accepts (T, C) or (B, T, C) token tensors.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, tokens: Tensor, return_attn: bool = False):
        squeeze = tokens.ndim == 2
        x = T.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
        if x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects dim {self.dim}, got {x.shape}")
        b, t, c = x.shape
        h = self.heads
        dh = c // h

        def split_heads(y):  # (B,T,C) -> (B,h,T,dh)
            return T.transpose(T.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q = split_heads(self.q(x))
        k = split_heads(self.k(x))
        v = split_heads(self.v(x))
        scores = T.scale(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(dh))
        attn = T.softmax_lastdim(scores)  # (B,h,T,T)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, c))
        out = self.out(merged)
        if squeeze:
            out = T.reshape(out, (t, c))
        if return_attn:
            return out, attn
        return out


class EncoderLayer(Module):
    """Pre-norm encoder: x + attn(norm1(x)), then + mlp(norm2(.))."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn_in = Linear(dim, ffn_hidden, rng)
        self.ffn_out = Linear(ffn_hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.add(x, self.attn(self.norm1(x)))
        return T.add(h, self.ffn_out(T.gelu(self.ffn_in(self.norm2(h)))))
