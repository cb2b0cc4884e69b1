"""Block-based 3D scene generation with latent tri-plane diffusion."""

__version__ = "0.1.0"
