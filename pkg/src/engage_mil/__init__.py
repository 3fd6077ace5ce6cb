"""Weakly-supervised engagement intensity prediction and localization."""

__version__ = "0.1.0"
