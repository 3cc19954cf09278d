"""Dense kernels, special functions, seeded random streams and the SMST tensor format.

Arrays are plain ``numpy.ndarray`` objects in float64 unless a benchmark
explicitly asks for float32.
"""

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DefinitenessError, DimensionError, DomainError

SMST_MAGIC = b"SMST"
SMST_VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<f4"): 2}
_CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(A, B):
    """Matrix product with an explicit shape contract.

    Leading (batch) dimensions broadcast as in ``numpy.matmul``.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {A.shape} and {B.shape}")
    return A @ B


def cholesky(S, sym_tol=1e-10):
    """Lower-triangular L with L @ L.T == S.

    Raises DefinitenessError naming the first non-positive pivot.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"cholesky: expected a square matrix, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if S.size and np.max(np.abs(S - S.T)) > sym_tol * scale:
        raise DomainError("cholesky: matrix is not symmetric")
    c = S.shape[0]
    L = np.zeros_like(S)
    for j in range(c):
        d = S[j, j] - L[j, :j] @ L[j, :j]
        if not d > 0.0:
            raise DefinitenessError(j, float(d))
        L[j, j] = math.sqrt(d)
        L[j + 1:, j] = (S[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


# --------------------------------------------------------------------------
# Special functions
# --------------------------------------------------------------------------

def lgamma(x):
    """log|Gamma(x)| for x > 0."""
    if np.ndim(x) == 0:
        if not x > 0:
            raise DomainError(f"lgamma: x must be positive, got {x}")
        return math.lgamma(float(x))
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("lgamma: x must be positive")
    return np.vectorize(math.lgamma, otypes=[np.float64])(x)


def erf(x):
    if np.ndim(x) == 0:
        return math.erf(float(x))
    return np.vectorize(math.erf, otypes=[np.float64])(np.asarray(x, dtype=np.float64))


def normal_cdf(x):
    """Standard normal CDF, accurate in both tails (uses erfc)."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(-float(x) / math.sqrt(2.0))
    f = np.vectorize(lambda t: 0.5 * math.erfc(-t / math.sqrt(2.0)), otypes=[np.float64])
    return f(np.asarray(x, dtype=np.float64))


_GAMMA_EPS = 1e-16
_GAMMA_TINY = 1e-300
_GAMMA_MAXITER = 2000


def _gamma_series(s, x):
    # P(s, x) by the power series; valid for x < s + 1.
    term = 1.0 / s
    total = term.copy()
    ap = s.copy()
    active = np.ones(s.shape, dtype=bool)
    for _ in range(_GAMMA_MAXITER):
        ap = ap + 1.0
        term = np.where(active, term * x / ap, term)
        total = np.where(active, total + term, total)
        active &= np.abs(term) > np.abs(total) * _GAMMA_EPS
        if not active.any():
            break
    return total * np.exp(-x + s * np.log(x) - _lgamma_arr(s))


def _gamma_contfrac(s, x):
    # Q(s, x) by the modified Lentz continued fraction; valid for x >= s + 1.
    b = x + 1.0 - s
    c = np.full(s.shape, 1.0 / _GAMMA_TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.ones(s.shape, dtype=bool)
    for i in range(1, _GAMMA_MAXITER):
        an = -i * (i - s)
        b = b + 2.0
        d = an * d + b
        d = np.where(np.abs(d) < _GAMMA_TINY, _GAMMA_TINY, d)
        c = b + an / c
        c = np.where(np.abs(c) < _GAMMA_TINY, _GAMMA_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(active, h * delta, h)
        active &= np.abs(delta - 1.0) > _GAMMA_EPS
        if not active.any():
            break
    return np.exp(-x + s * np.log(x) - _lgamma_arr(s)) * h


def _lgamma_arr(s):
    flat = np.array([math.lgamma(v) for v in s.ravel()])
    return flat.reshape(s.shape)


def _incomplete_gamma(s, x, upper):
    scalar = np.ndim(s) == 0 and np.ndim(x) == 0
    s, x = np.broadcast_arrays(np.asarray(s, dtype=np.float64), np.asarray(x, dtype=np.float64))
    if np.any(~(s > 0)):
        raise DomainError("incomplete gamma: shape parameter s must be positive")
    if np.any(~(x >= 0)):
        raise DomainError("incomplete gamma: x must be non-negative")
    out = np.empty(s.shape)
    zero = x == 0
    use_series = (x < s + 1.0) & ~zero
    use_cf = ~use_series & ~zero
    out[zero] = 1.0 if upper else 0.0
    if use_series.any():
        p = _gamma_series(s[use_series], x[use_series])
        out[use_series] = 1.0 - p if upper else p
    if use_cf.any():
        q = _gamma_contfrac(s[use_cf], x[use_cf])
        out[use_cf] = q if upper else 1.0 - q
    out = np.clip(out, 0.0, 1.0)
    return float(out) if scalar else out


def reg_lower_incomplete_gamma(s, x):
    """Regularized lower incomplete gamma P(s, x) = gamma(s, x) / Gamma(s)."""
    return _incomplete_gamma(s, x, upper=False)


def reg_upper_incomplete_gamma(s, x):
    """Regularized upper incomplete gamma Q(s, x) = 1 - P(s, x)."""
    return _incomplete_gamma(s, x, upper=True)


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

@dataclass
class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, stream_id)``.

    A stream is single-owner. Parallel code derives independent streams by
    ``stream_id`` instead of sharing one.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise DomainError("seed and stream_id must be unsigned 64-bit integers")
        key = int(self.seed) | (int(self.stream_id) << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self):
        return self._gen

    def child(self, stream_id):
        """A fresh stream with the same seed and a different id."""
        return RngStream(self.seed, stream_id)

    def gaussian(self, shape):
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None):
        return self._gen.random(shape)

    def permutation(self, n):
        return self._gen.permutation(n)


def rng_gaussian(stream, count):
    if count < 1:
        raise DomainError("rng_gaussian: count must be >= 1")
    return stream.gaussian(count)


# --------------------------------------------------------------------------
# SMST tensor format
# --------------------------------------------------------------------------

def tensor_to_bytes(array, dtype=np.float64):
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise DomainError(f"SMST supports float64/float32 only, got {dtype}")
    array = np.asarray(array, dtype=dt, order="C")
    if array.ndim > 255:
        raise DimensionError("SMST supports at most 255 dimensions")
    header = SMST_MAGIC + struct.pack("<IBB", SMST_VERSION, _DTYPE_CODES[dt], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes(order="C")


def tensor_from_bytes(buf, offset=0):
    """Parse one SMST tensor from ``buf`` starting at ``offset``.

    Returns ``(array, next_offset)``.
    """
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != SMST_MAGIC:
        raise ValueError("not an SMST tensor (bad magic)")
    version, code, ndim = struct.unpack_from("<IBB", buf, offset + 4)
    if version != SMST_VERSION:
        raise ValueError(f"unsupported SMST version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown SMST dtype code {code}")
    pos = offset + 10
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dt.itemsize
    if pos + nbytes > len(buf):
        raise ValueError("truncated SMST payload")
    data = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return data, pos + nbytes


def write_tensor(path_or_file, array, dtype=np.float64):
    blob = tensor_to_bytes(array, dtype)
    if isinstance(path_or_file, (io.IOBase,)) or hasattr(path_or_file, "write"):
        path_or_file.write(blob)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(blob)


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise ValueError(f"{path}: trailing bytes after SMST tensor")
    return array
