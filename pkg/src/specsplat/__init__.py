"""Glossy-surface reconstruction with Gaussian splats, split-sum shading and ASG indirect light."""

__version__ = "0.1.0"
