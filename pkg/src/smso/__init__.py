"""Statistically-motivated second-order pooling (SMSO) in numpy.

Covariance pooling, parametric vectorization, Gaussianizing transforms and
trainable scale/bias, with hand-derived gradients, statistical checks of the
Wishart -> chi-square -> Gaussian chain, and a small training loop.
"""

from .layers import (SmsoHead, bp_baseline_fwd, covariance_pool_fwd, gap_baseline_fwd, l2_pool_fwd,
                     pv_fwd, scale_bias_fwd, smso_alternative_fwd, smso_direct_fwd, transform_fwd)
from .numerics import RngStream

__version__ = "0.1.0"

__all__ = [
    "RngStream", "SmsoHead", "bp_baseline_fwd", "covariance_pool_fwd", "gap_baseline_fwd", "l2_pool_fwd",
    "pv_fwd", "scale_bias_fwd", "smso_alternative_fwd", "smso_direct_fwd", "transform_fwd",
]
