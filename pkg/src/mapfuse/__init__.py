"""Monocular localization against a point-cloud map with fused CNN and ViT features."""

__version__ = "0.1.0"
