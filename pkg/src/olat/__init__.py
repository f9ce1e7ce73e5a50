"""Unpaired point cloud completion through a structured (shape code, occlusion code) latent space."""

__version__ = "0.1.0"
