"""Conditional 3D diffusion for low-field to high-field MRI image quality transfer."""

__version__ = "0.1.0"
