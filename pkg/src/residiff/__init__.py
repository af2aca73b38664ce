"""Residual-dynamics diffusion models and diffusion-informed quadrotor control."""

__version__ = "0.1.0"
