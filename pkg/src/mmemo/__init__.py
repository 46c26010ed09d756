"""Multimodal emotion pre-training with conditional masking and prompt-based adaptation."""
from .labels import EmotionClass

__version__ = "0.1.0"
__all__ = ["EmotionClass"]
