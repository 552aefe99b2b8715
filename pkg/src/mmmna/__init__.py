"""Multi-modal multi-scale attention fusion for survival classification on 3-D MR volumes."""

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError, ParseError
from .fusion import MNAFFM, FusionModuleConfig, full_attention, linformer_attention, mnaffm_forward
from .harness import (TrainConfig, evaluate, mcnemar_test, run_cross_validation,
                      run_missing_modality_ablation, train)
from .model import MMMNAConfig, MMMNANet, build_model, focal_loss, mmmna_forward, total_loss
from .tensor import Tape, Tensor, backward, grad

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "NonFiniteError", "ParseError",
    "MNAFFM", "FusionModuleConfig", "full_attention", "linformer_attention", "mnaffm_forward",
    "TrainConfig", "evaluate", "mcnemar_test", "run_cross_validation",
    "run_missing_modality_ablation", "train",
    "MMMNAConfig", "MMMNANet", "build_model", "focal_loss", "mmmna_forward", "total_loss",
    "Tape", "Tensor", "backward", "grad",
]
__version__ = "0.1.0"
