"""Samplers and goodness-of-fit tests for the SMSO distribution chain.

Gaussian features -> Wishart covariance -> chi-square PV outputs -> (after the
square-root transform) Gaussian representation. Each stage can be tested
and histogrammed by :func:`pipeline_distcheck`.
"""

import functools
import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist

import numpy as np

from . import layers
from .errors import DegenerateInputError, DomainError
from .numerics import (RngStream, cholesky, normal_cdf, reg_lower_incomplete_gamma,
                       reg_upper_incomplete_gamma)

KS_TERMS = 100
SW_MIN, SW_MAX = 3, 5000


@dataclass
class DistReport:
    test_name: str
    statistic: float
    p_value: float
    n_samples: int
    alpha_level: float
    passed: bool
    stage: str = ""
    dim: int = -1

    def to_dict(self):
        return asdict(self)


@dataclass
class HistogramSpec:
    bin_edges: np.ndarray
    counts: np.ndarray
    dimension_label: str
    stage: str = ""
    dim: int = -1

    @property
    def n_samples(self):
        return int(self.counts.sum())

    def rows(self):
        """CSV rows ``(bin_left, bin_right, count, stage, dim)``."""
        return [(float(self.bin_edges[i]), float(self.bin_edges[i + 1]), int(self.counts[i]),
                 self.stage, self.dim) for i in range(len(self.counts))]


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def sample_mvn(mu, Sigma, n, stream, batch=None):
    """Rows i.i.d. N(mu, Sigma). Shape (n, c), or (batch, n, c) when ``batch`` is given."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    L = cholesky(Sigma)
    shape = (n, Sigma.shape[0]) if batch is None else (batch, n, Sigma.shape[0])
    return mu + stream.gaussian(shape) @ L.T


def random_spd(c, stream, ridge=0.1):
    """A random well-conditioned SPD matrix A A^T / c + ridge * I."""
    A = stream.gaussian((c, c))
    S = A @ A.T / c + ridge * np.eye(c)
    return 0.5 * (S + S.T)


def quadratic_form_samples(Sigma, w, n, count, stream, centered=False, chunk=2500):
    """Draws of w^T Y w / (w^T Sigma w) with Y the scatter matrix of n Gaussian rows.

    ``centered=False`` is the zero-mean construction Y = X^T X (chi2 with n
    degrees of freedom); ``centered=True`` uses X~^T X~ (n - 1 degrees).
    """
    Sigma = np.asarray(Sigma, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    scale = float(w[:, 0] @ Sigma @ w[:, 0])
    c = Sigma.shape[0]
    out = []
    done = 0
    while done < count:
        b = min(chunk, count - done)
        X = sample_mvn(np.zeros(c), Sigma, n, stream, batch=b)
        if centered:
            X = X - X.mean(axis=1, keepdims=True)
        Y = np.swapaxes(X, -1, -2) @ X
        out.append(layers.pv_fwd(Y, w)[:, 0] / scale)
        done += b
    return np.concatenate(out)


# --------------------------------------------------------------------------
# Chi-square and Kolmogorov-Smirnov
# --------------------------------------------------------------------------

def _check_dof(k):
    if not k >= 1:
        raise DomainError(f"chi-square degrees of freedom must be >= 1, got {k}")


def chi2_cdf(x, k):
    _check_dof(k)
    return reg_lower_incomplete_gamma(k / 2.0, np.maximum(x, 0.0) / 2.0)


def chi2_sf(x, k):
    _check_dof(k)
    return reg_upper_incomplete_gamma(k / 2.0, np.maximum(x, 0.0) / 2.0)


def ks_statistic(samples, cdf):
    """Two-sided one-sample KS distance D between the empirical CDF and ``cdf``."""
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise DomainError("ks_statistic: empty sample")
    F = np.asarray(cdf(x), dtype=np.float64)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def kolmogorov_sf(lam, terms=KS_TERMS):
    """P(K > lam) for the Kolmogorov limit distribution.

    The alternating series converges slowly for small lam, so below 1 the
    dual theta-function series for the CDF is summed instead.
    """
    if lam <= 0.0:
        return 1.0
    j = np.arange(1, terms + 1)
    if lam < 1.0:
        cdf = math.sqrt(2.0 * math.pi) / lam * np.sum(np.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8.0 * lam * lam)))
        return float(min(1.0, max(0.0, 1.0 - cdf)))
    p = 2.0 * np.sum((-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam))
    return float(min(1.0, max(0.0, p)))


def ks_pvalue(D, n):
    return kolmogorov_sf(math.sqrt(n) * D)


def chi2_ks_test(samples, k, alpha_level=0.01):
    samples = np.asarray(samples, dtype=np.float64).ravel()
    _check_dof(k)
    if samples.size < 20:
        raise DomainError("chi2_ks_test needs at least 20 samples")
    D = ks_statistic(samples, lambda x: chi2_cdf(x, k))
    p = ks_pvalue(D, samples.size)
    return DistReport(f"ks_chi2_{k:g}", D, p, samples.size, alpha_level, p > alpha_level)


# --------------------------------------------------------------------------
# Shapiro-Wilk (Royston 1992/1995 approximation)
# --------------------------------------------------------------------------

def _poly(coefs, x):
    return sum(c * x ** i for i, c in enumerate(coefs))


@functools.lru_cache(maxsize=64)
def _sw_coefficients(n):
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    nd = NormalDist()
    m = np.array([nd.inv_cdf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    mm = float(m @ m)
    u = 1.0 / math.sqrt(n)
    a_n = m[-1] / math.sqrt(mm) + _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u)
    if n > 5:
        a_n1 = m[-2] / math.sqrt(mm) + _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n ** 2 - 2 * a_n1 ** 2)
        a = m / math.sqrt(phi)
        a[[0, 1, -2, -1]] = [-a_n, -a_n1, a_n1, a_n]
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * a_n ** 2)
        a = m / math.sqrt(phi)
        a[[0, -1]] = [-a_n, a_n]
    return a


def _sw_pvalue(W, n):
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(W)) - math.asin(math.sqrt(0.75)))
        return min(1.0, max(0.0, p))
    y = math.log1p(-W) if W < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly([-2.273, 0.459], n)
        if y >= gamma:
            return 0.0
        y = -math.log(gamma - y)
        m = _poly([0.5440, -0.39978, 0.025054, -6.714e-4], n)
        s = math.exp(_poly([1.3822, -0.77857, 0.062767, -0.0020322], n))
    else:
        x = math.log(n)
        m = _poly([-1.5861, -0.31082, -0.083751, 0.0038915], x)
        s = math.exp(_poly([-0.4803, -0.082676, 0.0030302], x))
    if y == -math.inf:
        return 1.0
    return 1.0 - normal_cdf((y - m) / s)


def shapiro_wilk(samples, alpha_level=0.05):
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if not SW_MIN <= n <= SW_MAX:
        raise DomainError(f"shapiro_wilk needs {SW_MIN} <= n <= {SW_MAX}, got {n}")
    ss = float(np.sum((x - x.mean()) ** 2))
    if ss <= 1e-300 or x[-1] == x[0]:
        raise DegenerateInputError("shapiro_wilk: sample has zero variance")
    a = _sw_coefficients(n)
    W = float((a @ (x - x.mean())) ** 2 / ss)
    W = min(W, 1.0)
    if n == 3:
        W = max(W, 0.75)
    p = _sw_pvalue(W, n)
    return DistReport("shapiro_wilk", W, p, n, alpha_level, p > alpha_level)


# --------------------------------------------------------------------------
# Moments and histograms
# --------------------------------------------------------------------------

def moments(samples):
    """(mean, unbiased variance, skewness, excess kurtosis)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise DomainError("moments need at least 2 samples")
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d ** 2))
    var = float(np.sum(d ** 2) / (x.size - 1))
    if m2 == 0.0:
        return mean, var, 0.0, 0.0
    skew = float(np.mean(d ** 3) / m2 ** 1.5)
    kurt = float(np.mean(d ** 4) / m2 ** 2 - 3.0)
    return mean, var, skew, kurt


def histogram(samples, label, stage="", dim=-1, min_bins=10, max_bins=1000):
    """Freedman-Diaconis binning with at least ``min_bins`` bins."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, min_bins + 1)
    else:
        edges = np.histogram_bin_edges(x, bins="fd")
        if not min_bins <= len(edges) - 1 <= max_bins:
            edges = np.linspace(lo, hi, min(max(len(edges) - 1, min_bins), max_bins) + 1)
    counts, edges = np.histogram(x, bins=edges)
    return HistogramSpec(edges, counts, label, stage, dim)


# --------------------------------------------------------------------------
# End-to-end distribution check
# --------------------------------------------------------------------------

@dataclass
class DistcheckConfig:
    c: int = 64
    n: int = 196
    p: int = 8
    n_samples: int = 1500
    transform: str = "sqrt"
    sigma_ridge: float = 0.1
    alpha_level: float = 0.05
    ks_level: float = 0.01
    input_dims: int = 4
    chunk: int = 250

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown distcheck config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DistcheckResult:
    reports: list
    histograms: list
    stages: dict = field(repr=False)
    pass_fraction: float = 0.0
    passed: bool = False


def _simulate_pv(config, stream):
    """Sigma, W, one input row per sample, and z (n_samples x p)."""
    Sigma = random_spd(config.c, stream.child(1), config.sigma_ridge)
    W = layers.SmsoHead.init(config.c, config.p, stream.child(2)).W
    data = stream.child(3)
    rows, zs = [], []
    done = 0
    while done < config.n_samples:
        b = min(config.chunk, config.n_samples - done)
        X = sample_mvn(np.zeros(config.c), Sigma, config.n, data, batch=b)
        rows.append(X[:, 0, :])
        zs.append(layers.pv_fwd(layers.covariance_pool_fwd(X), W))
        done += b
    return Sigma, W, np.concatenate(rows), np.concatenate(zs)


def _head_output(z, W, n, transform):
    head = layers.SmsoHead(W=W, rho=np.zeros(W.shape[1]), beta=np.zeros(W.shape[1]), transform=transform)
    head.alpha_ema = layers.alpha_update(z)
    zp = layers.transform_fwd(z, transform, head.alpha(n), n)
    return layers.scale_bias_fwd(zp, head.rho, head.beta)


def _normality_verdict(zpp, alpha_level):
    reports = []
    for j in range(zpp.shape[1]):
        r = shapiro_wilk(zpp[:, j], alpha_level)
        r.stage, r.dim = "z''", j
        reports.append(r)
    frac = float(np.mean([r.passed for r in reports]))
    return reports, frac, frac >= 0.5


def pipeline_distcheck(config, stream):
    """Run features -> covariance -> PV -> transform -> scale/bias and test each stage.

    A run passes when at least half of the z'' dimensions pass Shapiro-Wilk.
    """
    if config.n_samples > SW_MAX:
        raise DomainError(f"n_samples must be <= {SW_MAX} for Shapiro-Wilk")
    Sigma, W, rows, z = _simulate_pv(config, stream)
    zpp = _head_output(z, W, config.n, config.transform)
    reports, hists = [], []
    for d in range(min(config.input_dims, config.c)):
        r = shapiro_wilk(rows[:, d], config.alpha_level)
        r.stage, r.dim = "x", d
        reports.append(r)
        hists.append(histogram(rows[:, d], f"x/{d}", "x", d))
    k = config.n - 1
    scale = np.einsum("ip,ij,jp->p", W, Sigma, W)
    for j in range(config.p):
        r = chi2_ks_test(z[:, j] * k / scale[j], k, config.ks_level)
        r.stage, r.dim = "z", j
        reports.append(r)
        hists.append(histogram(z[:, j], f"z/{j}", "z", j))
    norm_reports, frac, ok = _normality_verdict(zpp, config.alpha_level)
    reports.extend(norm_reports)
    for j in range(config.p):
        hists.append(histogram(zpp[:, j], f"z''/{j}", "z''", j))
    stages = {"x": rows, "z": z, "z''": zpp, "Sigma": Sigma, "W": W}
    return DistcheckResult(reports, hists, stages, frac, ok)


def normality_pass_rate(config, seeds, transforms=("sqrt",)):
    """Fraction of seeds whose z'' passes, per transform (shared simulated z per seed)."""
    wins = {t: 0 for t in transforms}
    for seed in seeds:
        _, W, _, z = _simulate_pv(config, RngStream(seed))
        for t in transforms:
            _, _, ok = _normality_verdict(_head_output(z, W, config.n, t), config.alpha_level)
            wins[t] += ok
    return {t: wins[t] / len(seeds) for t in transforms}
