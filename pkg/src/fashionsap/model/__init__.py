from .config import (
    ModelConfig,
    TrainConfig,
    configs_from_dict,
    full_scale_model_config,
    full_scale_train_config,
)
from .network import FashionSAPModel

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "FashionSAPModel",
    "configs_from_dict",
    "full_scale_model_config",
    "full_scale_train_config",
]
