"""
Two ways to compute an SMSO feature
===================================

The covariance route builds the c x c matrix Y and then evaluates w^T Y w
for every column of W. The projection route never forms Y.
"""

import numpy as np

from smso import layers
from smso.numerics import RngStream

stream = RngStream(0)
X = stream.gaussian((196, 64))   # 196 locations, 64 channels
W = stream.gaussian((64, 8))

# covariance route
Y = layers.covariance_pool_fwd(X)
z_direct = layers.pv_fwd(Y, W)

# projection route: ||X~ w||^2 / (n - 1)
z_alt = layers.l2_pool_fwd(X, W)

print("Y shape:", Y.shape)
print("z (direct):     ", np.round(z_direct, 4))
print("z (alternative):", np.round(z_alt, 4))
print("max relative difference: %.2e" % np.max(np.abs(z_direct - z_alt) / z_direct))

# gradients agree too
dzp = np.ones(8)
dX_d, dW_d = layers.smso_direct_bwd(X, W, dzp, alpha=0.5)
dX_a, dW_a = layers.smso_alternative_bwd(X, W, dzp, alpha=0.5)
print("max |dX difference|: %.2e" % np.max(np.abs(dX_d - dX_a)))
print("max |dW difference|: %.2e" % np.max(np.abs(dW_d - dW_a)))
