"""DisentangleFormer: parallel spatial/channel window attention with its own
tape-based autodiff core, toy hyperspectral training, ablation variants, and
CCA-based stream-correlation analysis."""

__version__ = "0.1.0"

from .tensor import Tape, Tensor, backward, grad_check, no_grad  # noqa: F401
from .block import BlockConfig, DisentangleBlock, window_partition, window_reverse  # noqa: F401
from .model import (  # noqa: F401
    DisentangleFormer,
    ModelConfig,
    StageConfig,
    build_model,
    build_variant,
    toy_model_config,
)
from .data import HsiCube, extract_patches, load_cube, split_dataset, synth_generate, write_cube  # noqa: F401
from .training import (  # noqa: F401
    TrainConfig,
    Trainer,
    cross_entropy,
    evaluate,
    evaluate_metrics,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .analysis import (  # noqa: F401
    CostReport,
    FeatureDump,
    count_flops,
    count_params,
    dump_features,
    first_canonical_correlation,
)
