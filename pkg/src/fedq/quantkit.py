"""Fixed-rate codebooks and stochastic (de)quantization.

All quantizers in the simulator are scalar, fixed-rate companding
quantizers: a rate-R codebook holds K = 2^R real centers, values are
rounded stochastically to one of the two bracketing centers so the
quantization noise has zero mean inside the codebook range, and
dequantization is an exact table lookup.

Three builders cover the schemes used in training:

- uniform centers over an explicit range (identity compander),
- tanh-companded centers fitted to a tensor (used for weights and
  activations),
- empirical-quantile centers fitted to a tensor (used for gradients).

Codebooks are immutable and shareable; quantization is pure given the
caller's RNG stream, consuming one uniform per element in row-major
order.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateRange, InvalidParams

# Ranges narrower than this collapse to a degenerate single-value codebook.
RANGE_EPS = 1e-12

COMPANDERS = ("identity", "tanh", "quantile")


@dataclass(frozen=True)
class Codebook:
    """Sorted quantization centers plus the compander that produced them.

    ``centers`` has length 2^rate and is strictly increasing, except for
    the degenerate fallback built from (near-)constant input where every
    center holds the same value and quantization maps everything to
    index 0. ``source_range`` records the span of the data the codebook
    was built from; centers always lie inside it.
    """

    rate: int
    centers: np.ndarray
    compander: str
    source_range: tuple[float, float]

    def __post_init__(self):
        if self.rate < 1:
            raise InvalidParams(f"rate must be >= 1, got {self.rate}")
        if self.compander not in COMPANDERS:
            raise InvalidParams(f"unknown compander {self.compander!r}")
        k = 1 << self.rate
        if self.centers.shape != (k,):
            raise InvalidParams(
                f"expected {k} centers for rate {self.rate}, got {self.centers.shape}"
            )
        self.centers.setflags(write=False)

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return bool(self.centers[-1] - self.centers[0] < RANGE_EPS)


@dataclass
class QuantizedTensor:
    """Low-bitwidth tensor: a flat index array plus its codebook.

    ``indices`` is row-major over ``shape`` and stored in the smallest
    unsigned dtype that fits the codebook, so a rate-R tensor really is
    an R-bit-per-entry representation (modulo byte alignment).
    """

    shape: tuple[int, ...]
    indices: np.ndarray
    codebook: Codebook

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        n = int(np.prod(self.shape)) if self.shape else 1
        if self.indices.ndim != 1 or self.indices.shape[0] != n:
            raise InvalidParams(
                f"index array of length {self.indices.shape} does not match shape {self.shape}"
            )
        if self.indices.size and int(self.indices.max()) >= self.codebook.size:
            raise InvalidParams("index exceeds codebook size")

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def _index_dtype(k: int):
    if k <= (1 << 8):
        return np.uint8
    if k <= (1 << 16):
        return np.uint16
    return np.uint32


def _require_finite_values(values: np.ndarray):
    if values.size == 0:
        raise InvalidParams("cannot build a codebook from an empty tensor")
    if not np.isfinite(values).all():
        raise InvalidParams("codebook input contains non-finite values")


def _repair_strictly_increasing(centers: np.ndarray) -> np.ndarray:
    """Nudge duplicate centers up by one ulp-scale per position in the run.

    Enforces out[i] = max(centers[i], out[i-1] + scale) via a cumulative
    maximum on the ramp-shifted sequence (the loop-free form of that
    recurrence).
    """
    if np.all(np.diff(centers) > 0.0):
        return centers
    scale = float(np.spacing(max(abs(centers[0]), abs(centers[-1]), 1.0)))
    ramp = scale * np.arange(centers.shape[0])
    return np.maximum.accumulate(centers - ramp) + ramp


def degenerate_codebook(value: float, rate: int, compander: str = "identity") -> Codebook:
    """Fallback codebook for constant input: K copies of one center.

    Strict-increase is waived; stochastic_quantize maps every element to
    index 0. Constant layers occur at initialization, so builders fitted
    to data fall back to this instead of failing.
    """
    k = 1 << rate
    centers = np.full(k, float(value))
    return Codebook(rate, centers, compander, (float(value), float(value)))


def build_uniform_codebook(lo: float, hi: float, rate: int) -> Codebook:
    """K = 2^rate equispaced centers over [lo, hi], endpoints included.

    Raises DegenerateRange when the requested range is narrower than
    RANGE_EPS; an explicit range that narrow is a caller error.
    """
    lo = float(lo)
    hi = float(hi)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InvalidParams("range endpoints must be finite")
    if hi - lo < RANGE_EPS:
        raise DegenerateRange(f"range [{lo}, {hi}] narrower than {RANGE_EPS}")
    k = 1 << int(rate)
    centers = np.linspace(lo, hi, k)
    return Codebook(int(rate), centers, "identity", (lo, hi))


def build_tanh_codebook(values: np.ndarray, rate: int) -> Codebook:
    """Companding codebook: uniform levels in tanh space, mapped back.

    The tensor is transformed by tanh, a uniform grid is laid over the
    transformed range, and the grid is pulled back through arctanh, so
    center spacing widens with |x|. The range endpoints are pinned to
    the exact extrema of ``values`` so the largest-magnitude entries stay
    exactly representable. Near-constant input falls back to the
    degenerate single-value codebook.
    """
    values = np.asarray(values, dtype=np.float64)
    _require_finite_values(values)
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < RANGE_EPS:
        return degenerate_codebook(0.5 * (lo + hi), int(rate), "tanh")
    k = 1 << int(rate)
    t = np.linspace(np.tanh(lo), np.tanh(hi), k)
    with np.errstate(divide="ignore", over="ignore"):
        centers = np.arctanh(t)
    centers[0] = lo
    centers[-1] = hi
    np.clip(centers, lo, hi, out=centers)
    centers = _repair_strictly_increasing(centers)
    return Codebook(int(rate), centers, "tanh", (lo, hi))


def build_quantile_codebook(values: np.ndarray, rate: int) -> Codebook:
    """Centers at the empirical quantiles p_i = (i + 0.5)/K of ``values``.

    Quantiles use linear interpolation between order statistics. Heavy
    ties produce duplicate centers, repaired by ulp-scale nudges to
    restore strict increase; constant input falls back to the degenerate
    codebook (an all-zero gradient tensor is the common case).
    """
    values = np.asarray(values, dtype=np.float64)
    _require_finite_values(values)
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < RANGE_EPS:
        return degenerate_codebook(0.5 * (lo + hi), int(rate), "quantile")
    k = 1 << int(rate)
    probs = (np.arange(k) + 0.5) / k
    order_stats = np.sort(values.ravel())
    centers = np.interp(probs * (order_stats.size - 1), np.arange(order_stats.size), order_stats)
    centers = _repair_strictly_increasing(centers)
    # The nudge can push the top center a few ulps past max(values).
    hi = max(hi, float(centers[-1]))
    return Codebook(int(rate), centers, "quantile", (lo, hi))


def _draw_indices(values: np.ndarray, cb: Codebook, rng: np.random.Generator) -> np.ndarray:
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if cb.is_degenerate:
        return np.zeros(flat.shape[0], dtype=np.int64)
    uniforms = rng.random(flat.shape[0])
    return _kernels.stochastic_round(flat, cb.centers, uniforms)


def stochastic_quantize(x: np.ndarray, cb: Codebook, rng: np.random.Generator) -> QuantizedTensor:
    """Quantize a tensor with randomized rounding to bracketing centers.

    Elements at or beyond the end centers clamp deterministically; for
    interior x with c_j <= x <= c_{j+1} the result is c_{j+1} with
    probability (x - c_j)/(c_{j+1} - c_j) and c_j otherwise, which makes
    the in-range quantization error zero-mean.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = _draw_indices(x, cb, rng)
    return QuantizedTensor(x.shape, idx.astype(_index_dtype(cb.size)), cb)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Exact codebook lookup; no noise is added."""
    return q.codebook.centers[q.indices].reshape(q.shape)


def empirical_mse(
    cb: Codebook,
    samples: np.ndarray,
    rng: np.random.Generator,
    draws: int = 8,
) -> float:
    """Monte-Carlo estimate of the mean squared quantization error.

    Quantizes ``samples`` ``draws`` times with fresh randomness and
    averages the squared reconstruction error. Samples outside
    ``cb.source_range`` incur deterministic clamping bias on top of the
    rounding variance.
    """
    if draws < 1:
        raise InvalidParams("draws must be >= 1")
    flat = np.ascontiguousarray(samples, dtype=np.float64).ravel()
    if flat.size == 0:
        raise InvalidParams("samples must be nonempty")
    total = 0.0
    for _ in range(draws):
        idx = _draw_indices(flat, cb, rng)
        err = flat - cb.centers[idx]
        total += float(np.mean(err * err))
    return total / draws
