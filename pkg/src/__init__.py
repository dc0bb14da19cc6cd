"""
Gaussian scene tokenization - task- and location-guided sparsification of
language-augmented Gaussian splat scenes for a toy language decoder.

Components:
- Scene storage and mocked backbone levels (GSVL, JSON, PLY)
- Dual sparsifier (128 task-selected tokens, 4 ROI tokens)
- Toy LoRA decoder with prefix-LM and contrastive training
- Object-counting benchmark and answer metrics
"""

__version__ = "1.0.0"
__description__ = "Gaussian scene sparsifier, toy decoder and counting benchmark"

from .app import SceneLanguageApp
from .config import *

__all__ = ['SceneLanguageApp']
