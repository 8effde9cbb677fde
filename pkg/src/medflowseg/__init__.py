"""Conditional flow-matching segmentation: training, sampling, fusion, metrics."""

from .config import RunConfig
from .data import (
    MaskEncoding,
    Sample,
    SyntheticSpec,
    decode_mask,
    encode_mask,
    generate_synthetic,
    load_dataset,
)
from .fa_attention import FAConfig
from .flow import (
    Endpoints,
    FlowState,
    euler_integrate,
    interpolate,
    sample_time,
    target_velocity,
    velocity_loss,
)
from .losses import EMAState, LossWeights, ce_loss, dice_loss, total_loss
from .metrics import MetricReport, dice, evaluate_pair, hd95, iou
from .networks import BackboneConfig, ConditionBundle, MedFlowSeg
from .sampling import (
    EnsembleResult,
    OracleVelocityModel,
    SamplerConfig,
    sample_ensemble,
    sample_once,
    staple_fuse,
)
from .training import TrainConfig, Trainer, build_model, load_model_from_checkpoint

__all__ = [
    "BackboneConfig",
    "ConditionBundle",
    "EMAState",
    "EnsembleResult",
    "Endpoints",
    "FAConfig",
    "FlowState",
    "LossWeights",
    "MaskEncoding",
    "MedFlowSeg",
    "MetricReport",
    "OracleVelocityModel",
    "RunConfig",
    "Sample",
    "SamplerConfig",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "build_model",
    "ce_loss",
    "decode_mask",
    "dice",
    "dice_loss",
    "encode_mask",
    "euler_integrate",
    "evaluate_pair",
    "generate_synthetic",
    "hd95",
    "interpolate",
    "iou",
    "load_dataset",
    "load_model_from_checkpoint",
    "sample_ensemble",
    "sample_once",
    "sample_time",
    "staple_fuse",
    "target_velocity",
    "total_loss",
    "velocity_loss",
]

__version__ = "0.1.0"
