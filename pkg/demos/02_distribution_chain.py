"""
From Gaussian features to Gaussian outputs
==========================================

Gaussian features give a Wishart covariance, the PV layer turns it into
scaled chi-square values, and the square root brings them back close to
a Gaussian. Each stage is tested and summarised by its moments.
"""

import numpy as np

from smso import statcheck
from smso.numerics import RngStream

config = statcheck.DistcheckConfig(c=64, n=196, p=8, n_samples=1500)
result = statcheck.pipeline_distcheck(config, RngStream(3))

for stage in ("x", "z", "z''"):
    reports = [r for r in result.reports if r.stage == stage]
    passed = sum(r.passed for r in reports)
    print(f"{stage:4s} {reports[0].test_name:16s} passed {passed}/{len(reports)} dimensions")

# skewness drops after the transform
z, zpp = result.stages["z"], result.stages["z''"]
for j in range(4):
    _, _, skew_z, _ = statcheck.moments(z[:, j])
    _, _, skew_out, _ = statcheck.moments(zpp[:, j])
    print(f"dim {j}: skew z = {skew_z:+.3f}   skew z'' = {skew_out:+.3f}")

# the chi-square law directly: zero-mean construction, n degrees of freedom
Sigma = statcheck.random_spd(4, RngStream(1))
w = np.array([1.0, -0.5, 0.25, 2.0])
q = statcheck.quadratic_form_samples(Sigma, w, 196, 10_000, RngStream(2))
print(statcheck.chi2_ks_test(q, 196))

# histogram data for plotting elsewhere
h = result.histograms[-1]
print(h.dimension_label, "bins:", len(h.counts), "total:", h.n_samples)
