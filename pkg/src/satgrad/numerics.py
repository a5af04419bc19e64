"""Dense linear algebra and activation/loss primitives.

Everything here keeps IEEE-754 behaviour visible: sigmoids saturate to
exactly 0.0/1.0, products underflow to exactly 0.0, and nothing is clipped
or floored.  Matrices are plain 2-D numpy arrays whose dtype encodes the
precision mode.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit


class PrecisionMode(enum.Enum):
    BINARY32 = "binary32"
    BINARY64 = "binary64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is PrecisionMode.BINARY32 else np.float64)

    @property
    def code(self) -> int:
        return 32 if self is PrecisionMode.BINARY32 else 64

    @classmethod
    def from_code(cls, code: int) -> "PrecisionMode":
        if code == 32:
            return cls.BINARY32
        if code == 64:
            return cls.BINARY64
        raise ValueError(f"unknown precision code {code}")

    @classmethod
    def parse(cls, value: "str | PrecisionMode") -> "PrecisionMode":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        for mode in cls:
            if key in (mode.value, str(mode.code), f"float{mode.code}"):
                return mode
        raise ValueError(f"unknown precision mode {value!r}")


class NonFiniteError(ValueError):
    """A tensor contains NaN or infinity where finite values are required."""


def as_matrix(values, precision: PrecisionMode = PrecisionMode.BINARY64) -> np.ndarray:
    """Coerce ``values`` into a C-contiguous 2-D array in ``precision``."""
    arr = np.asarray(values, dtype=precision.dtype)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"matrix dimensions must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr)


def validate_finite(arr: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NonFiniteError(f"{name} has {bad} non-finite entries")
    return arr


@njit(cache=True)
def _matmul_ordered(a, b, out):
    # i-k-j loop: each out[i, j] accumulates k = 0..K-1 left to right with a
    # separate multiply and add, the same order as the textbook triple loop.
    n, kdim = a.shape
    m = b.shape[1]
    for i in range(n):
        for k in range(kdim):
            aik = a[i, k]
            for j in range(m):
                out[i, j] += aik * b[k, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation order.

    Both operands must share a dtype.  The result is bitwise equal to the
    naive ``sum_k a[i, k] * b[k, j]`` loop evaluated in that dtype.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"precision mismatch: {a.dtype} vs {b.dtype}")
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {a.dtype}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    return _matmul_ordered(np.ascontiguousarray(a), np.ascontiguousarray(b), out)


def sigmoid(z, gain: float = 1.0):
    """Logistic function ``1 / (1 + exp(-gain * z))`` evaluated literally.

    Large positive arguments give exactly 1.0 and large negative ones give
    exactly 0.0 once ``exp`` overflows; both are intended.
    """
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    g = z.dtype.type(gain)
    with np.errstate(over="ignore"):
        out = 1 / (1 + np.exp(-(g * z)))
    return out if out.ndim else out.dtype.type(out)


def relu(z):
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    # np.maximum(0, -0.0) keeps the sign bit; where() returns a clean +0.0
    out = np.where(z > 0, z, z.dtype.type(0))
    return out if out.ndim else out.dtype.type(out)


def softmax_stable(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; works on 1-D or 2-D input."""
    z = np.asarray(logits)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """``-ln(probs[label])``; a zero probability yields ``+inf``.

    Use :func:`is_saturated_loss` to detect the infinite case.
    """
    p = np.asarray(probs)
    if p.ndim != 1:
        raise ValueError("cross_entropy expects a single probability vector")
    if not 0 <= int(label) < p.shape[0]:
        raise IndexError(f"label {label} out of range for {p.shape[0]} classes")
    with np.errstate(divide="ignore"):
        return -np.log(p[int(label)])


def is_saturated_loss(loss) -> bool:
    return bool(np.isposinf(loss))


def softmax_xent_grad(logits, label: int) -> np.ndarray:
    """Gradient of ``cross_entropy(softmax_stable(logits), label)`` w.r.t. logits."""
    p = softmax_stable(logits).copy()
    p[int(label)] -= 1
    return p


def log_softmax_xent(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy via log-sum-exp; finite even when a probability underflows."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(len(labels)), labels]


def sign(x):
    """Three-valued sign with ``sign(+-0.0) == 0``; NaN raises."""
    arr = np.asarray(x)
    if np.any(np.isnan(arr)):
        raise ValueError("sign of NaN is undefined")
    out = np.sign(arr) + 0  # + 0 turns -0.0 into 0.0
    return out if out.ndim else out.dtype.type(out)


def kurtosis(samples) -> float:
    """Pearson (non-excess) kurtosis ``m4 / m2**2`` with population moments."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 4:
        raise ValueError(f"kurtosis needs at least 4 samples, got {x.size}")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0:
        raise ValueError("kurtosis undefined for zero variance")
    m4 = np.mean(d**4)
    return float(m4 / (m2 * m2))


@dataclass(frozen=True)
class HistogramSpec:
    """Bin edges over log10|v|; exact zeros are counted outside the bins."""

    edges: tuple[float, ...] = field(default_factory=lambda: tuple(float(e) for e in range(-330, 11)))

    def __post_init__(self):
        if len(self.edges) < 2:
            raise ValueError("histogram needs at least two edges")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("histogram edges must be strictly increasing")

    @classmethod
    def decades(cls, lo: int = -330, hi: int = 10) -> "HistogramSpec":
        return cls(tuple(float(e) for e in range(lo, hi + 1)))


@dataclass
class MagnitudeHistogram:
    edges: tuple[float, ...]
    counts: np.ndarray
    exact_zero_count: int

    @property
    def total(self) -> int:
        return self.exact_zero_count + int(self.counts.sum())

    def merged(self, other: "MagnitudeHistogram") -> "MagnitudeHistogram":
        if self.edges != other.edges:
            raise ValueError("cannot merge histograms with different edges")
        return MagnitudeHistogram(self.edges, self.counts + other.counts,
                                  self.exact_zero_count + other.exact_zero_count)

    def rows(self):
        """(bin_lo_log10, bin_hi_log10, count) rows followed by the zero bucket."""
        for lo, hi, c in zip(self.edges, self.edges[1:], self.counts):
            yield lo, hi, int(c)


def magnitude_histogram(values, spec: HistogramSpec | None = None) -> MagnitudeHistogram:
    """Histogram of log10|v| for nonzero values plus a separate exact-zero count.

    Magnitudes outside the edge range are clamped into the first or last bin
    so that zeros plus bin counts always add up to the number of inputs.
    """
    spec = spec or HistogramSpec()
    v = np.asarray(values).ravel()
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("histogram input must be finite")
    zero = v == 0  # true for both +0.0 and -0.0
    nz = np.abs(v[~zero]).astype(np.float64)
    edges = np.asarray(spec.edges)
    counts = np.zeros(len(edges) - 1, dtype=np.int64)
    if nz.size:
        mags = np.log10(nz)
        idx = np.searchsorted(edges, mags, side="right") - 1
        idx = np.clip(idx, 0, len(counts) - 1)
        counts += np.bincount(idx, minlength=len(counts))
    return MagnitudeHistogram(tuple(spec.edges), counts, int(np.count_nonzero(zero)))


def median_abs_nonzero(values) -> float:
    """Median of |v| over nonzero entries; NaN if there are none."""
    v = np.abs(np.asarray(values).ravel())
    v = v[v != 0]
    return float(np.median(v.astype(np.float64))) if v.size else math.nan


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0:
        return math.nan
    return float(np.sum(dx * dy) / denom)
