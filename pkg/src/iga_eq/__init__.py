"""Hierarchical-spline IGA with an equilibrated-flux error estimator."""

__version__ = "0.1.0"
