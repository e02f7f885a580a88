"""Conformal Bach flow on periodic grids: curvature, pressure, flow and diagnostics."""
__version__ = "0.1.0"
