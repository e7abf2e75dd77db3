"""Occlusion-adaptive facial expression recognition from motion fields."""

__version__ = "0.1.0"
