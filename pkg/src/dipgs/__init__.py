"""Sparse-view Gaussian splatting with a deep image prior generator.

Subpackages: ``diffkit`` (reverse-mode autodiff on numpy), ``render``
(differentiable splatting), ``generator`` (U-Net prior), ``losses``,
``pipeline`` (staged fit) and ``sceneio`` (synthetic scenes, formats, metrics).
"""
from .scene import Camera, GaussianSet, SceneBounds

__version__ = "0.1.0"

__all__ = ["Camera", "GaussianSet", "SceneBounds", "__version__"]
