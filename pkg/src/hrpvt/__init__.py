"""HRPVT: PVT v2 backbone with high-resolution pyramid modules and a SimCC head,
built on a small reverse-mode autodiff engine over numpy."""

from .config import HDCConfig, ModelConfig, RunConfig, SceneSpec, SimCCConfig, StageConfig
from .model import HRPVT, build_model, count_params, forward_pose, load_weights, save_weights
from .simcc import PoseInstance
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "HDCConfig",
    "HRPVT",
    "ModelConfig",
    "PoseInstance",
    "RunConfig",
    "SceneSpec",
    "SimCCConfig",
    "StageConfig",
    "Tensor",
    "backward",
    "build_model",
    "count_params",
    "forward_pose",
    "load_weights",
    "save_weights",
]
