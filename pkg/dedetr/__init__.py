"""
dedetr - Data-efficient detection transformer kernels.

A numpy library and CLI that trains, evaluates and ablates a small detection
transformer on synthetic feature-pyramid scenes, with box-guided sparse
multi-scale sampling in the decoder and label augmentation over bipartite
set matching.
"""

__version__ = "0.1.0"

from dedetr.models import Box, BoxFormat, Detection, EvalResult, LabelSet, SceneSpec

__all__ = [
    "Box",
    "BoxFormat",
    "Detection",
    "EvalResult",
    "LabelSet",
    "SceneSpec",
    "__version__",
]
