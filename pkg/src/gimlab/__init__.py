"""Generative image manipulation detection and localization at desk scale."""

__version__ = "0.1.0"
