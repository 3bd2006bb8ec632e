"""Semantic-input steering networks on synthetic road scenes, with attribution and label-removal studies."""

from . import analysis, autodiff, models, scenegen, semantics

__version__ = "0.1.0"

__all__ = ["analysis", "autodiff", "models", "scenegen", "semantics", "__version__"]
