"""Spatial-memory visuomotor policy with GMM refinement and rule-based skill selection."""

__version__ = "0.1.0"
