"""Occlusion-robust gait recognition via adaptive residual feature correction."""

__version__ = "0.1.0"
