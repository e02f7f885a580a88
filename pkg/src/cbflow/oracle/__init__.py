"""Grid-free ground truth: closed-form metric families and jet-based curvature."""
from .families import (AnalyticMetricFamily, FourierMode, FourierScalar, conformally_flat,
                       doubly_warped, flat, fourier, off_diagonal)
from .jets import JetAlgebra, JetSpace
from .pointwise import OracleValues, oracle_bundle_at, sample_to_grid

__all__ = [
    "AnalyticMetricFamily", "FourierMode", "FourierScalar", "JetAlgebra", "JetSpace",
    "OracleValues", "conformally_flat", "doubly_warped", "flat", "fourier", "off_diagonal",
    "oracle_bundle_at", "sample_to_grid",
]
