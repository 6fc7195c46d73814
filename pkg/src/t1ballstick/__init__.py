"""Fit the T1-ball-stick diffusion-relaxation model by NLLS or self-supervised MLP."""

__version__ = "0.1.0"
