"""Gated cross-modal fusion for utterance-level sentiment classification."""

from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint
from .data import (
    Batch,
    SyntheticSpec,
    Utterance,
    Video,
    load_dataset,
    pad_batch,
    save_dataset,
    split,
    synth_generate,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DegenerateMaskError,
    DimensionError,
    ParseError,
    SchemaError,
    TrainingError,
)
from .model import (
    AblationConfig,
    ForwardTrace,
    ModelConfig,
    ModelParams,
    forward_video,
)
from .tensor import Tape, Tensor, backward
from .training import (
    GradCheckReport,
    Metrics,
    TrainConfig,
    TrainResult,
    evaluate,
    grad_check,
    model_grad_check,
    predict_videos,
    train,
)

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "AblationConfig",
    "ForwardTrace",
    "ModelConfig",
    "ModelParams",
    "forward_video",
    "Batch",
    "SyntheticSpec",
    "Utterance",
    "Video",
    "load_dataset",
    "save_dataset",
    "pad_batch",
    "split",
    "synth_generate",
    "TrainConfig",
    "TrainResult",
    "Metrics",
    "GradCheckReport",
    "train",
    "evaluate",
    "predict_videos",
    "grad_check",
    "model_grad_check",
    "LoadedCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DegenerateMaskError",
    "DimensionError",
    "ParseError",
    "SchemaError",
    "TrainingError",
]

__version__ = "0.1.0"
