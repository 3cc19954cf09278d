"""Pooling heads with hand-written reverse-mode gradients.

Every ``*_fwd`` accepts a single feature map ``X`` of shape ``(n, c)`` or a
batch ``(b, n, c)``; leading dimensions are mapped over independently. The
matching ``*_bwd`` takes the forward inputs plus the upstream gradient and
returns gradients for the inputs, summing parameter gradients over the batch.

The SMSO head chains

    X -> Y = cov(X) -> z_j = w_j^T Y w_j -> z'_j = sqrt(alpha_j z_j) - sqrt(2 n - 1)
      -> z''_j = beta_j + exp(rho_j) z'_j

and the alternative path reaches the same ``z`` as a per-location linear
projection followed by l2 pooling, without forming ``Y``.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, DimensionError, DomainError

EPS = 1e-12
NEG_TOL = 1e-10
ALPHA_FLOOR = 1e-8
TRANSFORMS = ("sqrt", "log", "cbrt", "none")
MODES = ("direct", "alternative")
ALPHA_MODES = ("ema", "fixed", "absorb")


def _feature_map(X, min_rows=2):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2:
        raise DimensionError(f"feature map must be (n, c) or (b, n, c), got shape {X.shape}")
    if X.shape[-2] < min_rows:
        raise DegenerateInputError(f"need at least {min_rows} spatial locations, got n={X.shape[-2]}")
    return X


def _centered(X):
    return X - X.mean(axis=-2, keepdims=True)


def _sum_to(grad, shape):
    # Reduce broadcast batch dimensions of a parameter gradient.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# --------------------------------------------------------------------------
# Covariance pooling
# --------------------------------------------------------------------------

def covariance_pool_fwd(X):
    """Y = X~^T X~ / (n - 1), X~ the column-centred feature map."""
    X = _feature_map(X)
    n = X.shape[-2]
    Xc = _centered(X)
    return np.swapaxes(Xc, -1, -2) @ Xc / (n - 1)


def covariance_pool_bwd(X, dY):
    X = _feature_map(X)
    dY = np.asarray(dY, dtype=np.float64)
    c = X.shape[-1]
    if dY.shape[-2:] != (c, c):
        raise DimensionError(f"covariance_pool_bwd: dY shape {dY.shape} does not match X shape {X.shape}")
    n = X.shape[-2]
    Xc = _centered(X)
    dXc = Xc @ (dY + np.swapaxes(dY, -1, -2)) / (n - 1)
    return dXc - dXc.mean(axis=-2, keepdims=True)


# --------------------------------------------------------------------------
# Parametric vectorization
# --------------------------------------------------------------------------

def _check_pv(Y, W):
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or Y.shape[-2:] != (W.shape[0], W.shape[0]):
        raise DimensionError(f"pv: Y shape {Y.shape} incompatible with W shape {W.shape}")
    return Y, W


def pv_fwd(Y, W):
    """z_j = w_j^T Y w_j for every column w_j of W.

    Round-off negatives down to -1e-10 are clamped to zero.
    """
    Y, W = _check_pv(Y, W)
    if np.any(np.all(W == 0.0, axis=0)):
        warnings.warn("pv_fwd: W has an all-zero column; its output carries no distributional meaning",
                      RuntimeWarning, stacklevel=2)
    z = np.sum(W * (Y @ W), axis=-2)
    return np.where((z < 0.0) & (z >= -NEG_TOL), 0.0, z)


def pv_bwd(Y, W, dz):
    Y, W = _check_pv(Y, W)
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape[-1] != W.shape[1]:
        raise DimensionError(f"pv_bwd: dz shape {dz.shape} incompatible with W shape {W.shape}")
    gW = W * dz[..., None, :]
    dY = gW @ W.T
    dW = _sum_to((Y + np.swapaxes(Y, -1, -2)) @ gW, W.shape)
    return dY, dW


# --------------------------------------------------------------------------
# Projection + l2 pooling (alternative route to z)
# --------------------------------------------------------------------------

def l2_pool_fwd(X, W):
    """z_j = ||X~ w_j||^2 / (n - 1): 1x1 projection then squared l2 pooling."""
    X = _feature_map(X)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != X.shape[-1]:
        raise DimensionError(f"l2_pool: X shape {X.shape} incompatible with W shape {W.shape}")
    U = _centered(X) @ W
    return np.sum(U * U, axis=-2) / (X.shape[-2] - 1)


def l2_pool_bwd(X, W, dz):
    X = _feature_map(X)
    W = np.asarray(W, dtype=np.float64)
    n = X.shape[-2]
    Xc = _centered(X)
    U = Xc @ W
    dU = U * (2.0 / (n - 1)) * np.asarray(dz, dtype=np.float64)[..., None, :]
    dXc = dU @ W.T
    dX = dXc - dXc.mean(axis=-2, keepdims=True)
    dW = _sum_to(np.swapaxes(Xc, -1, -2) @ dU, W.shape)
    return dX, dW


# --------------------------------------------------------------------------
# Element-wise Gaussianizing transforms
# --------------------------------------------------------------------------

def _check_nonneg(z, kind):
    if np.any(z < -NEG_TOL):
        raise DomainError(f"{kind} transform: input has values below -{NEG_TOL} (min {z.min()!r})")
    return np.maximum(z, 0.0)


def transform_fwd(z, kind="sqrt", alpha=1.0, n_ref=None, center=True):
    """Map chi-square distributed ``z`` towards a Gaussian.

    sqrt: sqrt(alpha z + eps) - sqrt(2 n_ref - 1)   (shift dropped if ``center`` is False)
    log:  log(z + eps)
    cbrt: (z / n_ref + eps) ** (1/3)
    none: identity
    """
    z = np.asarray(z, dtype=np.float64)
    if kind == "none":
        return z.copy()
    if kind == "log":
        if np.any(z < -NEG_TOL):
            raise DomainError(f"log transform: input has values below -{NEG_TOL}")
        return np.log(np.maximum(z, 0.0) + EPS)
    if kind == "sqrt":
        z = _check_nonneg(z, kind)
        out = np.sqrt(alpha * z + EPS)
        if center:
            if n_ref is None:
                raise ValueError("sqrt transform needs n_ref for the centering shift")
            out = out - math.sqrt(2.0 * n_ref - 1.0)
        return out
    if kind == "cbrt":
        if n_ref is None:
            raise ValueError("cbrt transform needs n_ref")
        z = _check_nonneg(z, kind)
        return np.cbrt(z / n_ref + EPS)
    raise ValueError(f"unknown transform {kind!r}; expected one of {TRANSFORMS}")


def transform_bwd(z, dzp, kind="sqrt", alpha=1.0, n_ref=None):
    z = np.maximum(np.asarray(z, dtype=np.float64), 0.0)
    dzp = np.asarray(dzp, dtype=np.float64)
    if kind == "none":
        return dzp.copy()
    if kind == "log":
        return dzp / (z + EPS)
    if kind == "sqrt":
        return dzp * alpha / (2.0 * np.sqrt(alpha * z + EPS))
    if kind == "cbrt":
        return dzp / (3.0 * n_ref) * (z / n_ref + EPS) ** (-2.0 / 3.0)
    raise ValueError(f"unknown transform {kind!r}; expected one of {TRANSFORMS}")


# --------------------------------------------------------------------------
# Trainable scale and bias
# --------------------------------------------------------------------------

def scale_bias_fwd(zp, rho, beta):
    """z'' = beta + exp(rho) * z'; exp keeps the scale strictly positive."""
    return beta + np.exp(rho) * zp


def scale_bias_bwd(zp, rho, dout):
    """Returns (d z', d rho, d beta)."""
    gamma = np.exp(rho)
    dout = np.asarray(dout, dtype=np.float64)
    dzp = dout * gamma
    drho = _sum_to(dout * gamma * zp, np.shape(rho))
    dbeta = _sum_to(dout, np.shape(rho))
    return dzp, drho, dbeta


# --------------------------------------------------------------------------
# Composite SMSO paths (fixed alpha)
# --------------------------------------------------------------------------

def smso_direct_fwd(X, W, alpha=1.0, n_ref=None, center=True):
    """sqrt-normalized PV output computed through the covariance matrix."""
    X = _feature_map(X)
    z = pv_fwd(covariance_pool_fwd(X), W)
    return transform_fwd(z, "sqrt", alpha, n_ref or X.shape[-2], center)


def smso_direct_bwd(X, W, dzp, alpha=1.0, n_ref=None):
    X = _feature_map(X)
    Y = covariance_pool_fwd(X)
    z = pv_fwd(Y, W)
    dz = transform_bwd(z, dzp, "sqrt", alpha, n_ref or X.shape[-2])
    dY, dW = pv_bwd(Y, W, dz)
    return covariance_pool_bwd(X, dY), dW


def smso_alternative_fwd(X, W, alpha=1.0, n_ref=None, center=True):
    """Same output as :func:`smso_direct_fwd`, via projection and l2 pooling."""
    X = _feature_map(X)
    z = l2_pool_fwd(X, W)
    return transform_fwd(z, "sqrt", alpha, n_ref or X.shape[-2], center)


def smso_alternative_bwd(X, W, dzp, alpha=1.0, n_ref=None):
    X = _feature_map(X)
    z = l2_pool_fwd(X, W)
    dz = transform_bwd(z, dzp, "sqrt", alpha, n_ref or X.shape[-2])
    return l2_pool_bwd(X, W, dz)


# --------------------------------------------------------------------------
# Baseline heads
# --------------------------------------------------------------------------

def _bp_parts(X):
    n = X.shape[-2]
    c = X.shape[-1]
    B = np.swapaxes(X, -1, -2) @ X / n
    v = B.reshape(B.shape[:-2] + (c * c,))
    s = np.sign(v) * np.sqrt(np.abs(v) + EPS)
    r = np.linalg.norm(s, axis=-1, keepdims=True)
    return v, s, r


def bp_baseline_fwd(X):
    """Bilinear pooling: uncentred Gram matrix, flattened, signed sqrt, l2-normalized."""
    X = _feature_map(X, min_rows=1)
    _, s, r = _bp_parts(X)
    return s / (r + EPS)


def bp_baseline_bwd(X, dout):
    X = _feature_map(X, min_rows=1)
    n, c = X.shape[-2:]
    v, s, r = _bp_parts(X)
    dout = np.asarray(dout, dtype=np.float64)
    ds = dout / (r + EPS) - s * np.sum(s * dout, axis=-1, keepdims=True) / (np.maximum(r, EPS) * (r + EPS) ** 2)
    dv = ds * 0.5 / np.sqrt(np.abs(v) + EPS)
    dB = dv.reshape(dv.shape[:-1] + (c, c))
    return X @ (dB + np.swapaxes(dB, -1, -2)) / n


def gap_baseline_fwd(X):
    """First-order reference: per-channel spatial mean."""
    X = _feature_map(X, min_rows=1)
    return X.mean(axis=-2)


def gap_baseline_bwd(X, dout):
    X = _feature_map(X, min_rows=1)
    n = X.shape[-2]
    return np.broadcast_to(np.asarray(dout)[..., None, :] / n, X.shape).copy()


# --------------------------------------------------------------------------
# Alpha estimation
# --------------------------------------------------------------------------

def alpha_update(z_batch, alpha_ema=None, momentum=0.9):
    """One EMA step on the batch mean of ``z``; ``alpha_ema=None`` means empty.

    The running value estimates w_j^T Sigma w_j (E[Y] = Sigma for the
    unbiased covariance) and never receives gradients.
    """
    z_batch = np.asarray(z_batch, dtype=np.float64)
    batch_mean = z_batch.reshape(-1, z_batch.shape[-1]).mean(axis=0)
    if alpha_ema is None:
        return batch_mean
    return momentum * np.asarray(alpha_ema) + (1.0 - momentum) * batch_mean


@dataclass
class GradientTape:
    """Forward intermediates needed by a head's backward pass."""

    saved: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.saved[key]


@dataclass
class SmsoHead:
    """Trainable SMSO pooling layer.

    ``alpha_mode``:
      * ``ema``: alpha_j = 2 (n - 1) / ema_j where ema_j tracks the batch mean
        of z_j. Since z_j = w_j^T Y w_j with Y normalized by n - 1, this puts
        alpha_j z_j on the 2 * chi2 scale the centering shift expects.
      * ``fixed``: alpha_j = ``alpha_fixed``.
      * ``absorb``: alpha_j = 2; the affine parameters learn the rest.
    """

    W: np.ndarray
    rho: np.ndarray
    beta: np.ndarray
    transform: str = "sqrt"
    mode: str = "direct"
    alpha_mode: str = "ema"
    alpha_fixed: float = 1.0
    ema_momentum: float = 0.9
    n_ref: int = None
    affine: bool = True
    alpha_ema: np.ndarray = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"transform must be one of {TRANSFORMS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {ALPHA_MODES}")
        if not 0.0 < self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in (0, 1)")

    @classmethod
    def init(cls, c, p, stream, **kwargs):
        """Glorot-normal W (variance 2 / (c + p)), identity affine."""
        W = stream.gaussian((c, p)) * math.sqrt(2.0 / (c + p))
        return cls(W=W, rho=np.zeros(p), beta=np.zeros(p), **kwargs)

    @property
    def p(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[1]

    @property
    def gamma(self):
        return np.exp(self.rho)

    def params(self):
        out = {"W": self.W}
        if self.affine:
            out.update(rho=self.rho, beta=self.beta)
        return out

    def alpha(self, n, ema=None):
        if self.alpha_mode == "fixed":
            return np.full(self.p, float(self.alpha_fixed))
        if self.alpha_mode == "absorb":
            return np.full(self.p, 2.0)
        ema = self.alpha_ema if ema is None else ema
        return 2.0 * (n - 1) / np.maximum(ema, ALPHA_FLOOR)

    def pool(self, X):
        """Un-normalized PV output z, through the configured path."""
        if self.mode == "direct":
            return pv_fwd(covariance_pool_fwd(X), self.W)
        return l2_pool_fwd(X, self.W)

    def forward(self, X, training=False):
        X = _feature_map(X)
        n = X.shape[-2]
        n_ref = self.n_ref or n
        tape = GradientTape({"X": X, "n_ref": n_ref})
        if self.mode == "direct":
            Y = covariance_pool_fwd(X)
            tape.saved["Y"] = Y
            z = pv_fwd(Y, self.W)
        else:
            z = l2_pool_fwd(X, self.W)
        ema = self.alpha_ema
        if self.alpha_mode == "ema":
            if training:
                self.alpha_ema = alpha_update(z, self.alpha_ema, self.ema_momentum)
                ema = self.alpha_ema
            elif ema is None:
                # not yet calibrated: borrow this batch's mean without storing it
                ema = alpha_update(z)
        alpha = self.alpha(n, ema)
        zp = transform_fwd(z, self.transform, alpha, n_ref)
        out = scale_bias_fwd(zp, self.rho, self.beta)
        tape.saved.update(z=z, zp=zp, alpha=alpha)
        return out, tape

    def backward(self, tape, dout):
        """Returns (dX, {param name: gradient})."""
        dzp, drho, dbeta = scale_bias_bwd(tape["zp"], self.rho, dout)
        dz = transform_bwd(tape["z"], dzp, self.transform, tape["alpha"], tape["n_ref"])
        if self.mode == "direct":
            dY, dW = pv_bwd(tape["Y"], self.W, dz)
            dX = covariance_pool_bwd(tape["X"], dY)
        else:
            dX, dW = l2_pool_bwd(tape["X"], self.W, dz)
        grads = {"W": dW}
        if self.affine:
            grads.update(rho=drho, beta=dbeta)
        return dX, grads


class BpHead:
    """Parameter-free bilinear pooling head with the SmsoHead interface."""

    def __init__(self, c):
        self.c = c

    @property
    def out_dim(self):
        return self.c * self.c

    def params(self):
        return {}

    def forward(self, X, training=False):
        return bp_baseline_fwd(X), GradientTape({"X": X})

    def backward(self, tape, dout):
        return bp_baseline_bwd(tape["X"], dout), {}


class GapHead:
    """Parameter-free global average pooling head."""

    def __init__(self, c):
        self.c = c

    @property
    def out_dim(self):
        return self.c

    def params(self):
        return {}

    def forward(self, X, training=False):
        return gap_baseline_fwd(X), GradientTape({"X": X})

    def backward(self, tape, dout):
        return gap_baseline_bwd(tape["X"], dout), {}
