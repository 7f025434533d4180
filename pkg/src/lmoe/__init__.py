"""Token-level mixture of LoRA experts over a frozen transformer, on a numpy autodiff core."""

from .backbone import BackboneConfig, BackboneModel, init_backbone
from .config import DataConfig, RunConfig, load_config
from .diffcore import Tensor, float64_mode, no_grad
from .errors import (CheckpointError, ConfigError, ContractError, DimensionError, DivergenceError,
                     EmptyBatchError, GradCheckError, IncompatibleVersionError, IntegrityError, LmoeError,
                     RankError, SequenceLengthError, VocabularyError)
from .gating import GateNet, composed_forward, route, routing_stats
from .lora_experts import ExpertLibrary, init_library
from .model import ExpertConfig, LMoEModel, build_model
from .objective import ar_loss, joint_objective, lb_loss, total_loss
from .trainer import TrainConfig, TrainState, init_state, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BackboneModel", "init_backbone",
    "DataConfig", "RunConfig", "load_config",
    "Tensor", "float64_mode", "no_grad",
    "CheckpointError", "ConfigError", "ContractError", "DimensionError", "DivergenceError", "EmptyBatchError",
    "GradCheckError", "IncompatibleVersionError", "IntegrityError", "LmoeError", "RankError",
    "SequenceLengthError", "VocabularyError",
    "GateNet", "composed_forward", "route", "routing_stats",
    "ExpertLibrary", "init_library",
    "ExpertConfig", "LMoEModel", "build_model",
    "ar_loss", "joint_objective", "lb_loss", "total_loss",
    "TrainConfig", "TrainState", "init_state", "load_checkpoint", "save_checkpoint", "train", "train_step",
]
