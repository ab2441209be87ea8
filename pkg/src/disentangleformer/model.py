"""Two-stage toy network assembly: patch embedding, window-attention block
stacks, patch merging between stages, and a pooled classification head.

Input is a per-pixel-labeled hyperspectral patch (C_in, P, P); the model
predicts the class of the patch's center pixel. After each merge the channel
dim doubles and spatial extents halve; the dimension ledger is asserted at
construction time.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import VARIANTS, BlockConfig, DisentangleBlock, window_partition, window_reverse
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class StageConfig:
    depth: int
    block: BlockConfig


@dataclass
class ModelConfig:
    in_channels: int
    num_classes: int
    patch_size: int = 1
    embed_dim: int = 16
    stages: list[StageConfig] = field(default_factory=list)
    merge_between_stages: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.stages[0].block.dim != self.embed_dim:
            raise ConfigError(
                f"stage 0 dim {self.stages[0].block.dim} must equal embed_dim {self.embed_dim}"
            )
        dim = self.embed_dim
        for i, stage in enumerate(self.stages[1:], start=1):
            if self.merge_between_stages:
                dim *= 2
            if stage.block.dim != dim:
                raise ConfigError(f"stage {i} dim {stage.block.dim} must be {dim} per the merge ledger")


def toy_model_config(in_channels: int, num_classes: int, *, variant: str = "Parallel",
                     ffn_kind: str = "ms_ffn", embed_dim: int = 16, depths: tuple[int, int] = (2, 2),
                     window: int = 4, heads: int = 2, seed: int = 0) -> ModelConfig:
    """Desk-scale defaults: patch 8x8 inputs at patch_size 1, two stages."""
    stages = []
    dim = embed_dim
    for i, depth in enumerate(depths):
        stages.append(StageConfig(depth=depth, block=BlockConfig(
            dim=dim, window=window, variant=variant, heads=heads, ffn_kind=ffn_kind)))
        dim *= 2
    return ModelConfig(in_channels=in_channels, num_classes=num_classes, patch_size=1,
                       embed_dim=embed_dim, stages=stages, seed=seed)


def build_variant(base: ModelConfig, variant_tag: str) -> ModelConfig:
    """Copy of base with only the variant / ffn_kind switch flipped in every stage."""
    if variant_tag in VARIANTS:
        swap = {"variant": variant_tag}
    elif variant_tag in ("ms_ffn", "standard_mlp"):
        swap = {"ffn_kind": variant_tag}
    else:
        raise ConfigError(f"unknown variant tag {variant_tag!r}")
    stages = [
        StageConfig(depth=s.depth, block=dataclasses.replace(s.block, **swap))
        for s in base.stages
    ]
    return dataclasses.replace(base, stages=stages)


class PatchEmbed(Module):
    """Linear projection of non-overlapping patch_size^2 pixel groups.

    The group vector orders channels slowest, then rows, then columns of the
    pixel group (the loop oracle in the tests pins this layout).
    """

    def __init__(self, in_channels: int, patch_size: int, embed_dim: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.patch_size = patch_size
        self.proj = Linear(in_channels * patch_size * patch_size, embed_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:  # (B, C, P, P) -> (B, H', W', E)
        b, c, p, q = x.shape
        ps = self.patch_size
        if c != self.in_channels:
            raise ShapeError(f"embed expects {self.in_channels} channels, got {x.shape}")
        if p % ps != 0 or q % ps != 0:
            raise ConfigError(f"input extent {p}x{q} not divisible by patch_size {ps}")
        hp, wp = p // ps, q // ps
        x = T.reshape(x, (b, c, hp, ps, wp, ps))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, H', W', C, ps, ps)
        return self.proj(T.reshape(x, (b, hp, wp, c * ps * ps)))


class PatchMerging(Module):
    """Concat each 2x2 neighborhood (4C), layer-norm, project to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(4 * dim, 2 * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:  # (B, H, W, C) -> (B, H/2, W/2, 2C)
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            x = T.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)))
            h, w = h + h % 2, w + w % 2
        x = T.reshape(x, (b, h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (b, h // 2, w // 2, 4 * c))
        return self.reduce(self.norm(x))


class ClassifierHead(Module):
    """Global average pool over space, then a linear map to class scores."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.fc = Linear(dim, num_classes, rng)

    def __call__(self, features: Tensor) -> Tensor:  # (B, h, w, C) -> (B, K)
        return self.fc(T.tmean(features, axis=(1, 2)))


class DisentangleFormer(Module):
    """Patch embed -> [stage blocks -> merge]* -> stage blocks -> head."""

    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.embed = PatchEmbed(cfg.in_channels, cfg.patch_size, cfg.embed_dim, rng)
        self.stages = [
            [DisentangleBlock(stage.block, rng) for _ in range(stage.depth)]
            for stage in cfg.stages
        ]
        self.merges = [
            PatchMerging(cfg.stages[i].block.dim, rng)
            for i in range(len(cfg.stages) - 1)
        ] if cfg.merge_between_stages else []
        self.head = ClassifierHead(cfg.stages[-1].block.dim, cfg.num_classes, rng)

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(f"{prefix}embed.")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stages.{si}.{bi}.")
            if si < len(self.merges):
                yield from self.merges[si].named_parameters(f"{prefix}merges.{si}.")
        yield from self.head.named_parameters(f"{prefix}head.")

    def forward_features(self, x: Tensor, capture: dict | None = None,
                         capture_block: tuple[int, int] | None = None) -> Tensor:
        """(B, C_in, P, P) or (C_in, P, P) -> (B, h, w, C_final).

        When capture is given, the block addressed by capture_block
        (stage index, block index) stores its pre-fuse stream activations
        into the dict.
        """
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        feat = self.embed(x)
        for si, blocks in enumerate(self.stages):
            m = self.cfg.stages[si].block.window
            windows, grid = window_partition(feat, m)
            for bi, block in enumerate(blocks):
                want = capture is not None and capture_block == (si, bi)
                windows = block(windows, capture=capture if want else None)
            feat = window_reverse(windows, grid)
            if si < len(self.merges):
                feat = self.merges[si](feat)
        if squeeze:
            feat = T.reshape(feat, feat.shape[1:])
        return feat

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(self.forward_features(x))

    def flat_blocks(self) -> list[tuple[int, int]]:
        """(stage, block) addresses in execution order."""
        return [(si, bi) for si, blocks in enumerate(self.stages) for bi in range(len(blocks))]


def build_model(cfg: ModelConfig) -> DisentangleFormer:
    return DisentangleFormer(cfg)


# -- config (de)serialization -------------------------------------------------

def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    try:
        stages = [
            StageConfig(depth=int(s["depth"]), block=BlockConfig(**s["block"]))
            for s in d["stages"]
        ]
        rest = {k: v for k, v in d.items() if k != "stages"}
        return ModelConfig(stages=stages, **rest)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc
