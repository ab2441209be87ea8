"""Disentanglement and efficiency instrumentation: pre-fuse feature hooks,
first canonical correlation between the spatial and channel streams, and
analytic parameter/FLOP accounting.

FDM1 feature-dump format (little-endian):
  magic "FDM1" | u32 n | u32 p | u32 q | f64[n*p] X_s | f64[n*q] X_c |
  u32 metadata length | metadata JSON (UTF-8)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .block import _STREAMS, BlockConfig
from .errors import ConfigError, ContractError, FileFormatError, SingularMatrixError
from .model import DisentangleFormer, ModelConfig
from .tensor import Tape, Tensor, no_grad

_DUMP_MAGIC = b"FDM1"


# -- feature dumps -------------------------------------------------------------

@dataclass
class FeatureDump:
    """Paired stream activations captured just before fusion; one row per
    window (token axes mean-pooled)."""

    hooks: tuple[str, str]
    x_s: np.ndarray  # (n, p)
    x_c: np.ndarray  # (n, q)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x_s.shape[0] != self.x_c.shape[0]:
            raise ContractError(
                f"stream row counts differ: {self.x_s.shape[0]} vs {self.x_c.shape[0]}"
            )


def available_hooks(cfg: BlockConfig) -> tuple[str, ...]:
    return tuple(f"pre_fuse_{name}" for name in _STREAMS[cfg.variant])


def dump_features(model: DisentangleFormer, patches: np.ndarray,
                  hooks: tuple[str, str] = ("pre_fuse_st", "pre_fuse_ct"),
                  max_samples: int = 256, seed: int = 0,
                  block_index: int = -1, batch_size: int = 64,
                  metadata: dict | None = None) -> FeatureDump:
    """Run the model over sampled patches and capture both requested streams
    at the addressed block (flat index into execution order)."""
    addresses = model.flat_blocks()
    stage_block = addresses[block_index]
    block_cfg = model.cfg.stages[stage_block[0]].block
    have = available_hooks(block_cfg)
    for hook in hooks:
        if hook not in have:
            raise ConfigError(
                f"hook {hook!r} absent in variant {block_cfg.variant!r}; available: {have}"
            )
    rng = np.random.default_rng(seed)
    n = len(patches)
    take = min(max_samples, n)
    idx = np.sort(rng.permutation(n)[:take])
    rows_a: list[np.ndarray] = []
    rows_b: list[np.ndarray] = []
    with no_grad():
        for lo in range(0, take, batch_size):
            chunk = patches[idx[lo : lo + batch_size]]
            cap: dict = {}
            with Tape():
                model.forward_features(Tensor(chunk), capture=cap, capture_block=stage_block)
            rows_a.append(cap[hooks[0]].mean(axis=1))  # pool N tokens -> (B*nw, C)
            rows_b.append(cap[hooks[1]].mean(axis=1))
    meta = {"hooks": list(hooks), "block": list(stage_block),
            "variant": block_cfg.variant, "seed": seed, "samples": int(take)}
    meta.update(metadata or {})
    return FeatureDump(hooks=hooks, x_s=np.concatenate(rows_a),
                       x_c=np.concatenate(rows_b), metadata=meta)


def write_dump(dump: FeatureDump, path) -> None:
    n, p = dump.x_s.shape
    q = dump.x_c.shape[1]
    meta_blob = json.dumps(dump.metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<III", n, p, q))
        f.write(dump.x_s.astype("<f8").tobytes())
        f.write(dump.x_c.astype("<f8").tobytes())
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)


def read_dump(path) -> FeatureDump:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _DUMP_MAGIC:
            raise FileFormatError(f"bad dump magic {magic!r}", 0)
        header = f.read(12)
        if len(header) != 12:
            raise FileFormatError("truncated dump header", 4)
        n, p, q = struct.unpack("<III", header)
        xs_bytes = f.read(n * p * 8)
        xc_bytes = f.read(n * q * 8)
        if len(xs_bytes) != n * p * 8 or len(xc_bytes) != n * q * 8:
            raise FileFormatError("truncated dump payload", 16)
        meta_len_raw = f.read(4)
        if len(meta_len_raw) != 4:
            raise FileFormatError("missing metadata length", 16 + (n * p + n * q) * 8)
        (meta_len,) = struct.unpack("<I", meta_len_raw)
        meta_blob = f.read(meta_len)
        if len(meta_blob) != meta_len:
            raise FileFormatError("truncated metadata", 20 + (n * p + n * q) * 8)
        meta = json.loads(meta_blob.decode("utf-8"))
    hooks = tuple(meta.get("hooks", ("pre_fuse_st", "pre_fuse_ct")))
    return FeatureDump(
        hooks=hooks,
        x_s=np.frombuffer(xs_bytes, dtype="<f8").reshape(n, p).copy(),
        x_c=np.frombuffer(xc_bytes, dtype="<f8").reshape(n, q).copy(),
        metadata=meta,
    )


# -- canonical correlation ------------------------------------------------------

@dataclass
class CcaResult:
    value: float
    x_projection: np.ndarray  # (p,)
    y_projection: np.ndarray  # (q,)

    def scatter(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(n, 2) canonical-variate pairs for plotting."""
        xc = x - x.mean(axis=0)
        yc = y - y.mean(axis=0)
        return np.stack([xc @ self.x_projection, yc @ self.y_projection], axis=1)


def _inv_sqrt_psd(sigma: np.ndarray, ridge: float, what: str) -> np.ndarray:
    dim = sigma.shape[0]
    vals, vecs = np.linalg.eigh(sigma + ridge * np.eye(dim))
    tiny = max(vals.max(), 0.0) * 1e-12
    if vals.min() <= tiny:
        raise SingularMatrixError(
            f"{what} covariance is singular (min eigenvalue {vals.min():.3e}); "
            "pass a positive ridge"
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def first_canonical_correlation(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> CcaResult:
    """Largest correlation achievable between linear projections of x and y.

    Centers columns, whitens each block with (cov + ridge I)^(-1/2), and takes
    the top singular value of the whitened cross-covariance, clamped to [0,1].
    Requires more rows than either column count.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"need aligned 2-D matrices, got {x.shape} and {y.shape}")
    n, p = x.shape
    q = y.shape[1]
    if n <= max(p, q):
        raise ContractError(f"need n > max(p, q); got n={n}, p={p}, q={q}")
    if ridge < 0:
        raise ConfigError(f"ridge must be >= 0, got {ridge}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sxx = xc.T @ xc / (n - 1)
    syy = yc.T @ yc / (n - 1)
    sxy = xc.T @ yc / (n - 1)
    wx = _inv_sqrt_psd(sxx, ridge, "x")
    wy = _inv_sqrt_psd(syy, ridge, "y")
    u, s, vt = np.linalg.svd(wx @ sxy @ wy)
    value = float(np.clip(s[0], 0.0, 1.0))
    return CcaResult(value=value, x_projection=wx @ u[:, 0], y_projection=wy @ vt[0])


# -- cost accounting -------------------------------------------------------------

# per-element costs of composite elementwise stages, stated so every number
# in a report is recomputable by hand
FLOP_CONVENTION = {
    "multiply_add": 2,
    "bias_add_per_output": 1,
    "gelu_per_element": 1,
    "sigmoid_per_element": 1,
    "relu_per_element": 1,
    "residual_add_per_element": 1,
    "scale_per_element": 1,
    "softmax_per_element": 3,  # exp + accumulate + divide
    "layer_norm_per_element": 6,  # mean, center, square, average, normalize, affine
    "mean_pool_per_element": 1,
}


@dataclass
class CostReport:
    params: dict[str, int] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    convention: dict = field(default_factory=lambda: dict(FLOP_CONVENTION))

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_flops(self) -> int:
        return sum(self.flops.values())


def count_params(model: DisentangleFormer) -> CostReport:
    """Exact learnable-scalar counts grouped by top-level module."""
    report = CostReport()
    for name, p in model.named_parameters():
        parts = name.split(".")
        group = ".".join(parts[:3]) if parts[0] == "stages" else parts[0]
        report.params[group] = report.params.get(group, 0) + p.size
    return report


def flops_linear(rows: int, in_features: int, out_features: int) -> int:
    return 2 * rows * in_features * out_features + rows * out_features


def flops_depthwise(channels: int, height: int, width: int, kernel: int) -> int:
    return 2 * channels * height * width * kernel * kernel


def flops_layer_norm(rows: int, dim: int) -> int:
    return FLOP_CONVENTION["layer_norm_per_element"] * rows * dim


def flops_attention(tokens: int, dim: int, heads: int) -> int:
    """One multi-head self-attention call on (tokens, dim)."""
    proj = 4 * flops_linear(tokens, dim, dim)
    scores = 2 * tokens * tokens * dim  # q k^T over all heads
    scale = heads * tokens * tokens
    soft = FLOP_CONVENTION["softmax_per_element"] * heads * tokens * tokens
    weighted = 2 * tokens * tokens * dim
    return proj + scores + scale + soft + weighted


def flops_encoder_layer(tokens: int, dim: int, heads: int, ffn_hidden: int) -> int:
    total = flops_layer_norm(tokens, dim) + flops_attention(tokens, dim, heads)
    total += tokens * dim  # attention residual
    total += flops_layer_norm(tokens, dim)
    total += flops_linear(tokens, dim, ffn_hidden)
    total += tokens * ffn_hidden  # gelu
    total += flops_linear(tokens, ffn_hidden, dim)
    total += tokens * dim  # ffn residual
    return total


def _flops_path(cfg: BlockConfig, tokens: int, dim: int, layers: int) -> int:
    total = flops_layer_norm(tokens, dim)
    for _ in range(layers):
        total += flops_encoder_layer(tokens, dim, cfg.heads, dim * cfg.encoder_ffn_expand)
    return total


def flops_block(cfg: BlockConfig, windows: int) -> dict[str, int]:
    """Analytic per-part FLOPs of one block applied to `windows` windows."""
    n, c, m = cfg.tokens, cfg.dim, cfg.window
    streams = _STREAMS[cfg.variant]
    out: dict[str, int] = {}
    path_cost = {
        "st": _flops_path(cfg, n, c, cfg.st_layers),
        "ct": _flops_path(cfg, c, n, cfg.ct_layers),
    }
    for name in streams:
        out[f"path_{name}"] = windows * path_cost[name.rstrip("2")]
    if len(streams) == 2:
        two_c = 2 * c
        ste = flops_depthwise(two_c, m, m, 3)
        ste += n * two_c  # gap
        bottleneck = max(1, two_c // cfg.ste_reduction)
        ste += flops_linear(1, two_c, bottleneck) + bottleneck  # gate in + relu
        ste += flops_linear(1, bottleneck, two_c) + two_c  # gate out + sigmoid
        ste += 2 * n * two_c  # gate multiply + residual
        out["ste"] = windows * ste
        out["fuse_proj"] = windows * (flops_linear(n, two_c, c) + n * c)
    else:
        out["fuse_proj"] = windows * (flops_linear(n, c, c) + n * c)
    hidden = c * cfg.msffn_expand
    if cfg.ffn_kind == "ms_ffn":
        ffn = flops_linear(n, c, hidden)
        ffn += n * hidden + flops_layer_norm(n, hidden)  # phi 1
        bw = hidden // len(cfg.msffn_kernels)
        for k in cfg.msffn_kernels:
            ffn += flops_depthwise(bw, m, m, k)
        ffn += n * hidden  # conv residual
        ffn += n * hidden + flops_layer_norm(n, hidden)  # phi 2
        ffn += flops_linear(n, hidden, c)
    else:
        ffn = flops_linear(n, c, hidden) + n * hidden + flops_linear(n, hidden, c)
    out["ffn"] = windows * (ffn + n * c)  # + block residual
    return out


def count_flops(cfg: ModelConfig, input_shape: tuple[int, int, int]) -> CostReport:
    """Analytic FLOPs of one forward pass at the declared (C_in, P, P) shape."""
    c_in, p, q = input_shape
    if c_in != cfg.in_channels:
        raise ConfigError(f"input shape channels {c_in} != model in_channels {cfg.in_channels}")
    report = CostReport()
    ps = cfg.patch_size
    h, w = p // ps, q // ps
    report.flops["embed"] = flops_linear(h * w, c_in * ps * ps, cfg.embed_dim)
    dim = cfg.embed_dim
    for si, stage in enumerate(cfg.stages):
        m = stage.block.window
        hp = (h + m - 1) // m * m
        wp = (w + m - 1) // m * m
        windows = (hp // m) * (wp // m)
        per_block = flops_block(stage.block, windows)
        for part, cost in per_block.items():
            report.flops[f"stages.{si}.{part}"] = cost * stage.depth
        if si < len(cfg.stages) - 1 and cfg.merge_between_stages:
            h2, w2 = (h + 1) // 2, (w + 1) // 2
            rows = h2 * w2
            report.flops[f"merges.{si}"] = (
                flops_layer_norm(rows, 4 * dim) + flops_linear(rows, 4 * dim, 2 * dim)
            )
            h, w, dim = h2, w2, 2 * dim
    k = cfg.num_classes
    report.flops["head"] = h * w * dim + flops_linear(1, dim, k)
    return report
