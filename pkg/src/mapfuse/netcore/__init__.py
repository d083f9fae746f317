from mapfuse.netcore.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mapfuse.netcore.config import (
    ABLATION_MODES,
    ConfigurationError,
    NetworkConfig,
    ShapeContractError,
)
from mapfuse.netcore.loss import pose_loss
from mapfuse.netcore.model import (
    FeatureBundle,
    ForwardOutput,
    LocalizationNet,
    NumericFailure,
    build_model,
    compose_correction,
    corr,
    prepare_inputs,
    regress_pose,
    spatial_softmax,
)

__all__ = [
    "ABLATION_MODES",
    "Checkpoint",
    "CheckpointError",
    "ConfigurationError",
    "FeatureBundle",
    "ForwardOutput",
    "LocalizationNet",
    "NetworkConfig",
    "NumericFailure",
    "ShapeContractError",
    "build_model",
    "compose_correction",
    "corr",
    "load_checkpoint",
    "pose_loss",
    "prepare_inputs",
    "regress_pose",
    "save_checkpoint",
    "spatial_softmax",
]
