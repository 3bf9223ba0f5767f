"""Recurrent video restoration with learned, noise-robust propagated features."""

from .core import (
    ConfigError,
    ContainerError,
    FeatureMap,
    FeatureStage,
    LatentCode,
    ModelConfig,
    PriorParams,
    VideoClip,
    load_checkpoint,
    load_config,
    make_config,
    read_tensor,
    save_checkpoint,
    write_tensor,
)
from .flow import estimate_flow, refine_mv, warp
from .pipeline import NCFLNet, build_model, load_model, run_clip, step, total_loss, train_two_stage
from .refine import attend, bin_probability, cross_entropy_loss, decode_features, encode_features, prior, quantize
from .restore import restore

__version__ = "0.1.0"
