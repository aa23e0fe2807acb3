"""Desk-scale fashion vision-language pre-training.

A from-scratch implementation of symbol-aware, attribute-prompted
vision-language pre-training with five joint objectives (symbol/image
similarity, prompt token prediction, token replace prediction, image-text
similarity with a momentum feature queue, image-text matching) and four
downstream tasks (cross-modal retrieval, category/subcategory recognition,
text-modified image retrieval, attention-map extraction), small enough to
train on a CPU in minutes.
"""

from .core import BACKEND
from .model import FashionSAPModel, ModelConfig, TrainConfig
from .taxonomy import FashionSymbol, map_category, symbol_token

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FashionSAPModel",
    "FashionSymbol",
    "ModelConfig",
    "TrainConfig",
    "map_category",
    "symbol_token",
    "__version__",
]
