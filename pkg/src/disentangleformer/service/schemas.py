"""Request/response models for every operation the service and CLI expose.

Requests resolve all defaults at validation time, so a request's dump is the
complete, reproducible configuration echoed into the run manifest.
"""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..block import FFN_KINDS, VARIANTS


class SplitSpec(BaseModel):
    train_fraction: float = Field(default=0.3, gt=0.0, lt=1.0)
    stratified: bool = True
    seed: int = 0


class ModelSpec(BaseModel):
    """Toy-scale architecture knobs; expanded to the full staged config."""

    variant: str = "Parallel"
    ffn_kind: str = "ms_ffn"
    embed_dim: int = 16
    depths: tuple[int, ...] = (2, 2)
    window: int = 4
    heads: int = 2
    seed: int = 0

    model_config = ConfigDict(extra="forbid")


class TrainSpec(BaseModel):
    epochs: int = Field(default=40, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    log_every: int = Field(default=1, ge=1)


class MetricsModel(BaseModel):
    oa: float
    aa: float
    kappa: float
    excluded_classes: int = 0


# -- synth ---------------------------------------------------------------------

class SynthRequest(BaseModel):
    out_dir: str
    name: str = "synthetic"
    classes: int = Field(default=4, ge=2)
    height: int = Field(default=32, ge=1)
    width: int = Field(default=32, ge=1)
    bands: int = Field(default=16, ge=2)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    blob_size: int = Field(default=8, ge=1)
    seed: int = 7


class SynthResponse(BaseModel):
    cube_path: str
    labels_path: str
    manifest_path: str
    class_pixel_counts: dict[int, int]


# -- train ---------------------------------------------------------------------

class TrainRequest(BaseModel):
    cube_path: str
    labels_path: str
    out_dir: str
    name: str = "run"
    patch: int = Field(default=8, ge=1)
    split: SplitSpec = SplitSpec()
    arch: ModelSpec = ModelSpec()
    train: TrainSpec = TrainSpec()


class TrainResponse(BaseModel):
    checkpoint_path: str
    log_path: str
    manifest_path: str
    epochs_run: int
    final_loss: float
    final_train_oa: float
    test_metrics: MetricsModel
    total_params: int


# -- eval ----------------------------------------------------------------------

class EvalRequest(BaseModel):
    checkpoint_path: str
    cube_path: str
    labels_path: str
    out_dir: str
    name: str = "eval"
    patch: int = Field(default=8, ge=1)
    split: SplitSpec = SplitSpec()
    subset: str = Field(default="test", pattern="^(train|test|all)$")


class EvalResponse(BaseModel):
    metrics: MetricsModel
    confusion_matrix: list[list[int]]
    n_samples: int
    manifest_path: str


# -- ablate ----------------------------------------------------------------------

ABLATION_GRID: tuple[tuple[str, str], ...] = tuple(
    [(v, "ms_ffn") for v in VARIANTS] + [("Parallel", "standard_mlp")]
)


class AblateRequest(BaseModel):
    cube_path: str
    labels_path: str
    out_dir: str
    name: str = "ablation"
    patch: int = Field(default=8, ge=1)
    split: SplitSpec = SplitSpec()
    arch: ModelSpec = ModelSpec()
    budget: TrainSpec = TrainSpec(epochs=12)


class AblateRow(BaseModel):
    variant: str
    ffn_kind: str
    params: int
    final_loss: float
    test_oa: float
    test_aa: float
    test_kappa: float


class AblateResponse(BaseModel):
    csv_path: str
    manifest_path: str
    rows: list[AblateRow]


# -- cca ----------------------------------------------------------------------

class CcaRequest(BaseModel):
    checkpoint_path: str
    cube_path: str
    labels_path: str
    out_dir: str
    name: str = "cca"
    patch: int = Field(default=8, ge=1)
    split: SplitSpec = SplitSpec()
    hooks: tuple[str, str] = ("pre_fuse_st", "pre_fuse_ct")
    max_samples: int = Field(default=256, ge=2)
    seed: int = 0
    block_index: int = -1
    ridge: float = Field(default=1e-6, ge=0.0)


class CcaResponse(BaseModel):
    cca_value: float
    n_rows: int
    dump_path: str
    scatter_csv_path: str
    manifest_path: str


# -- profile ----------------------------------------------------------------------

class ProfileRequest(BaseModel):
    out_dir: str
    name: str = "profile"
    checkpoint_path: str | None = None
    arch: ModelSpec = ModelSpec()
    bands: int = Field(default=16, ge=1)
    classes: int = Field(default=4, ge=1)
    patch: int = Field(default=8, ge=1)


class ProfileResponse(BaseModel):
    params_by_module: dict[str, int]
    flops_by_part: dict[str, int]
    total_params: int
    total_flops: int
    convention: dict[str, int]
    report_path: str
    manifest_path: str
