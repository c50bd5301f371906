"""Functional network definitions: base classifiers and the critic."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifiers import (
    ARCHITECTURES,
    HighEndSpec,
    LowEndSpec,
    MLPSpec,
    architecture_from_dict,
    highend_forward,
    lowend_forward,
)
from .critic import (
    CriticSpec,
    critic_features,
    critic_forward,
    critic_input_gradient_norm,
    estimate_critic_memory,
    format_bytes,
    pad_for_layer,
)
from .init import SCHEMES, init_params
from .params import ADAPTED, SHARED, BatchNormState, ParamInfo, ParamSet, average_stats

__all__ = [
    "ADAPTED", "SHARED", "ARCHITECTURES", "BatchNormState", "Checkpoint", "CriticSpec",
    "HighEndSpec", "LowEndSpec", "MLPSpec", "ParamInfo", "ParamSet", "SCHEMES",
    "architecture_from_dict", "average_stats", "critic_features", "critic_forward", "critic_input_gradient_norm",
    "estimate_critic_memory", "format_bytes", "highend_forward", "init_params", "load_checkpoint",
    "lowend_forward", "pad_for_layer", "save_checkpoint",
]
