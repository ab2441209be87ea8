"""The disentangled attention block: window partitioning, parallel
spatial-token / channel-token encoder paths, squeezed-token-enhancer fusion,
the multi-scale feed-forward network, and every ablation wiring of the
variant grid.

Within a window of N = M*M tokens and C channels, the spatial path attends
over the N tokens (dim C) and the channel path attends over the C channels
(dim N, via transpose). Their outputs are reshaped to M x M maps, fused by
concatenation + a gated depthwise bottleneck, projected back to C, and added
to the window input. The block then adds a multi-scale convolutional FFN.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import EncoderLayer, LayerNorm, Linear, Module, fan_in_uniform
from .tensor import Tensor

VARIANTS = (
    "Parallel",
    "SerialCTST",
    "SerialSTCT",
    "ParallelSTST",
    "ParallelCTCT",
    "STOnly",
    "CTOnly",
)
FFN_KINDS = ("ms_ffn", "standard_mlp")

# Which logical stream feeds each fuse slot, per variant. The first slot
# occupies fused channels [0, C), the second [C, 2C).
_STREAMS = {
    "Parallel": ("st", "ct"),
    "SerialCTST": ("st", "ct"),
    "SerialSTCT": ("st", "ct"),
    "ParallelSTST": ("st", "st2"),
    "ParallelCTCT": ("ct", "ct2"),
    "STOnly": ("st",),
    "CTOnly": ("ct",),
}


@dataclass
class BlockConfig:
    """All block hyperparameters plus the architecture-variant switch."""

    dim: int
    window: int
    variant: str = "Parallel"
    st_layers: int = 1
    ct_layers: int = 1
    heads: int = 2
    ste_reduction: int = 8
    msffn_kernels: tuple[int, ...] = (1, 3, 5, 7)
    msffn_expand: int = 4
    ffn_kind: str = "ms_ffn"
    encoder_ffn_expand: int = 2

    def __post_init__(self):
        self.msffn_kernels = tuple(int(k) for k in self.msffn_kernels)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}; expected one of {FFN_KINDS}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.tokens % self.heads != 0:
            raise ConfigError(
                f"window token count {self.tokens} not divisible by heads {self.heads} "
                "(the channel path attends over tokens of that dimension)"
            )
        if self.ste_reduction < 1:
            raise ConfigError(f"ste_reduction must be >= 1, got {self.ste_reduction}")
        hidden = self.dim * self.msffn_expand
        if hidden % len(self.msffn_kernels) != 0:
            raise ConfigError(
                f"ffn hidden width {hidden} not divisible by {len(self.msffn_kernels)} branches"
            )
        if any(k % 2 == 0 or k < 1 for k in self.msffn_kernels):
            raise ConfigError(f"ffn kernel sizes must be odd and positive, got {self.msffn_kernels}")

    @property
    def tokens(self) -> int:
        return self.window * self.window


@dataclass
class WindowGrid:
    """Geometry of one partition call, enough to invert it exactly."""

    height: int
    width: int
    channels: int
    window: int
    batch: int | None = None  # None when the input had no batch axis

    @property
    def padded_height(self) -> int:
        m = self.window
        return (self.height + m - 1) // m * m

    @property
    def padded_width(self) -> int:
        m = self.window
        return (self.width + m - 1) // m * m

    @property
    def rows(self) -> int:
        return self.padded_height // self.window

    @property
    def cols(self) -> int:
        return self.padded_width // self.window

    @property
    def windows_per_image(self) -> int:
        return self.rows * self.cols

    @property
    def tokens(self) -> int:
        return self.window * self.window


def window_partition(x: Tensor, window: int) -> tuple[Tensor, WindowGrid]:
    """Tile a feature map into non-overlapping M x M windows of flat tokens.

    x: (H, W, C) or (B, H, W, C). Zero-pads H and W up to multiples of M
    (recorded in the grid), tiles row-major, and flattens each window
    row-major to (N, C). Returns (B*nw, N, C) stacked windows plus the grid.
    """
    if window <= 0:
        raise ConfigError(f"window size must be positive, got {window}")
    if x.ndim == 3:
        grid = WindowGrid(x.shape[0], x.shape[1], x.shape[2], window, batch=None)
        x = T.reshape(x, (1,) + x.shape)
        b = 1
    elif x.ndim == 4:
        b = x.shape[0]
        grid = WindowGrid(x.shape[1], x.shape[2], x.shape[3], window, batch=b)
    else:
        raise ShapeError(f"window_partition expects (H,W,C) or (B,H,W,C), got {x.shape}")
    hp, wp = grid.padded_height, grid.padded_width
    if hp != grid.height or wp != grid.width:
        x = T.pad(x, ((0, 0), (0, hp - grid.height), (0, wp - grid.width), (0, 0)))
    m, c = window, grid.channels
    x = T.reshape(x, (b, hp // m, m, wp // m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (b * grid.windows_per_image, m * m, c)), grid


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Exact inverse of window_partition; strips any padding."""
    b = grid.batch if grid.batch is not None else 1
    m, c = grid.window, grid.channels
    expect = (b * grid.windows_per_image, grid.tokens, c)
    if windows.shape != expect:
        raise ShapeError(f"window_reverse got {windows.shape}, grid implies {expect}")
    x = T.reshape(windows, (b, grid.rows, grid.cols, m, m, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, grid.padded_height, grid.padded_width, c))
    if grid.padded_height != grid.height:
        x = T.narrow(x, 1, 0, grid.height)
    if grid.padded_width != grid.width:
        x = T.narrow(x, 2, 0, grid.width)
    if grid.batch is None:
        x = T.reshape(x, (grid.height, grid.width, c))
    return x


class PathEncoder(Module):
    """Norm followed by a stack of pre-norm encoder layers over given tokens."""

    def __init__(self, dim: int, layers: int, heads: int, ffn_expand: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.layers = [EncoderLayer(dim, heads, dim * ffn_expand, rng) for _ in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm(x)
        for layer in self.layers:
            x = layer(x)
        return x


class SqueezedTokenEnhancer(Module):
    """Gated depthwise bottleneck on a channel-first map: the map plus its
    3x3 depthwise response scaled by a squeeze-style channel gate
    sigmoid(W2 relu(W1 GAP(h))) with bottleneck channels/reduction."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        self.conv = Tensor(fan_in_uniform(rng, (channels, 3, 3), 9), requires_grad=True)
        bottleneck = max(1, channels // reduction)
        self.gate_in = Linear(channels, bottleneck, rng)
        self.gate_out = Linear(bottleneck, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:  # (B, channels, M, M)
        h = T.depthwise_conv2d(x, self.conv)
        pooled = T.tmean(h, axis=(-2, -1))  # (B, channels)
        gate = T.sigmoid(self.gate_out(T.relu(self.gate_in(pooled))))
        gate = T.reshape(gate, gate.shape + (1, 1))
        return T.add(x, T.mul(h, gate))


class MultiScaleFFN(Module):
    """Feed-forward whose hidden state is mixed by parallel depthwise
    convolutions at several kernel sizes, channels split evenly.

    phi = gelu followed by channel layer norm. The output projection starts
    at zero so a fresh block contributes nothing past its residual.
    """

    def __init__(self, dim: int, expand: int, kernels: tuple[int, ...], rng: np.random.Generator):
        self.kernels = kernels
        hidden = dim * expand
        self.branch_width = hidden // len(kernels)
        self.proj_in = Linear(dim, hidden, rng)
        self.norm_in = LayerNorm(hidden)
        self.branches = [
            Tensor(fan_in_uniform(rng, (self.branch_width, k, k), k * k), requires_grad=True)
            for k in kernels
        ]
        self.norm_out = LayerNorm(hidden)
        self.proj_out = Linear(hidden, dim, zero_init=True)

    def __call__(self, yw: Tensor, window: int) -> Tensor:  # (B, N, C)
        b, n, c = yw.shape
        m = window
        y2d = T.reshape(yw, (b, m, m, c))
        z_in = self.norm_in(T.gelu(self.proj_in(y2d)))  # (B,M,M,hidden)
        z_cf = T.transpose(z_in, (0, 3, 1, 2))  # channel-first for conv
        parts = []
        for i, kern in enumerate(self.branches):
            lane = T.narrow(z_cf, 1, i * self.branch_width, self.branch_width)
            parts.append(T.depthwise_conv2d(lane, kern))
        mixed = T.concat(parts, axis=1)
        mixed = T.transpose(mixed, (0, 2, 3, 1))
        z_out = self.norm_out(T.gelu(T.add(z_in, mixed)))
        return T.reshape(self.proj_out(z_out), (b, n, c))


class StandardMLP(Module):
    """Position-wise two-layer MLP used by the FFN ablation; zero-init output."""

    def __init__(self, dim: int, expand: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * expand, rng)
        self.fc2 = Linear(dim * expand, dim, zero_init=True)

    def __call__(self, yw: Tensor, window: int) -> Tensor:
        return self.fc2(T.gelu(self.fc1(yw)))


class DisentangleBlock(Module):
    """One block: stream paths per the configured variant, fusion, FFN.

    Dual-stream variants fuse via concat -> SqueezedTokenEnhancer -> zero-init
    2C -> C projection -> window residual; single-stream variants degenerate
    to a zero-init C -> C projection plus the same residual. The FFN output
    is added by the block (out = y + ffn(y)).
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, n = cfg.dim, cfg.tokens
        streams = _STREAMS[cfg.variant]
        if "st" in streams:
            self.st_path = PathEncoder(c, cfg.st_layers, cfg.heads, cfg.encoder_ffn_expand, rng)
        if "ct" in streams:
            self.ct_path = PathEncoder(n, cfg.ct_layers, cfg.heads, cfg.encoder_ffn_expand, rng)
        if "st2" in streams:
            self.st_path2 = PathEncoder(c, cfg.st_layers, cfg.heads, cfg.encoder_ffn_expand, rng)
        if "ct2" in streams:
            self.ct_path2 = PathEncoder(n, cfg.ct_layers, cfg.heads, cfg.encoder_ffn_expand, rng)
        if len(streams) == 2:
            self.ste = SqueezedTokenEnhancer(2 * c, cfg.ste_reduction, rng)
            self.fuse_proj = Linear(2 * c, c, zero_init=True)
        else:
            self.fuse_proj = Linear(c, c, zero_init=True)
        if cfg.ffn_kind == "ms_ffn":
            self.ffn = MultiScaleFFN(c, cfg.msffn_expand, cfg.msffn_kernels, rng)
        else:
            self.ffn = StandardMLP(c, cfg.msffn_expand, rng)

    # -- stream paths ------------------------------------------------------

    def run_st(self, xw: Tensor, second: bool = False) -> Tensor:
        path = self.st_path2 if second else self.st_path
        return path(xw)

    def run_ct(self, xw: Tensor, second: bool = False) -> Tensor:
        path = self.ct_path2 if second else self.ct_path
        return T.swap_last2(path(T.swap_last2(xw)))

    def streams(self, xw: Tensor) -> tuple[Tensor, Tensor | None]:
        """Stream outputs feeding the fuse slots, per the variant wiring."""
        v = self.cfg.variant
        if v == "Parallel":
            return self.run_st(xw), self.run_ct(xw)
        if v == "SerialCTST":
            rc = self.run_ct(xw)
            return self.run_st(rc), rc
        if v == "SerialSTCT":
            rs = self.run_st(xw)
            return rs, self.run_ct(rs)
        if v == "ParallelSTST":
            return self.run_st(xw), self.run_st(xw, second=True)
        if v == "ParallelCTCT":
            return self.run_ct(xw), self.run_ct(xw, second=True)
        if v == "STOnly":
            return self.run_st(xw), None
        return self.run_ct(xw), None  # CTOnly

    # -- fusion and ffn ------------------------------------------------------

    def fuse(self, xw: Tensor, first: Tensor, second: Tensor | None) -> Tensor:
        b, n, c = xw.shape
        m = self.cfg.window
        if second is None:
            return T.add(xw, self.fuse_proj(first))
        ms = T.reshape(first, (b, m, m, c))
        mc = T.reshape(second, (b, m, m, c))
        fused = T.concat([ms, mc], axis=-1)  # (B,M,M,2C)
        calibrated = self.ste(T.transpose(fused, (0, 3, 1, 2)))
        calibrated = T.transpose(calibrated, (0, 2, 3, 1))
        proj = T.reshape(self.fuse_proj(calibrated), (b, n, c))
        return T.add(xw, proj)

    def __call__(self, xw: Tensor, capture: dict | None = None) -> Tensor:
        if xw.ndim != 3 or xw.shape[1] != self.cfg.tokens or xw.shape[2] != self.cfg.dim:
            raise ShapeError(
                f"block expects (B, {self.cfg.tokens}, {self.cfg.dim}) windows, got {xw.shape}"
            )
        first, second = self.streams(xw)
        if capture is not None:
            names = _STREAMS[self.cfg.variant]
            capture[f"pre_fuse_{names[0]}"] = first.data.copy()
            if second is not None:
                capture[f"pre_fuse_{names[1]}"] = second.data.copy()
        y = self.fuse(xw, first, second)
        return T.add(y, self.ffn(y, self.cfg.window))
