"""Adversarially trained LDDMM registration: stationary (SVF) and geodesic-shooting (EPDiff) generators."""

__version__ = "0.1.0"
