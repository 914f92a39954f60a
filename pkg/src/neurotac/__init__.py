"""Neuromorphic vision-based tactile sensing: event windows, heatmaps, CNN grasp-stage classification."""

__version__ = "0.1.0"
