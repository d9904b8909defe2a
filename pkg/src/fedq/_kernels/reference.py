"""Pure-numpy reference implementation of the quantization kernels.

Semantics are the contract for the compiled twin in ``_quantcore.pyx``:
given identical inputs (including the pre-drawn uniforms) both backends
must return bit-identical index arrays.
"""

import numpy as np

BACKEND = "numpy"


def stochastic_round(values, centers, uniforms):
    """Map each value to a codebook index by randomized nearest-bracket rounding.

    ``centers`` must be strictly increasing. For c_j <= x <= c_{j+1} the
    result is j+1 when the element's uniform draw falls below
    (x - c_j) / (c_{j+1} - c_j), else j; values outside the codebook range
    clamp to the end indices. One uniform is consumed per element, in
    order, so the output is reproducible regardless of schedule.
    """
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    k = centers.shape[0]
    if k == 1:
        return np.zeros(values.shape[0], dtype=np.int64)
    j = np.searchsorted(centers, values, side="right") - 1
    jc = np.clip(j, 0, k - 2)
    lo = centers[jc]
    hi = centers[jc + 1]
    p = (values - lo) / (hi - lo)
    out = jc + (uniforms < p)
    out[j < 0] = 0
    out[j >= k - 1] = k - 1
    return out.astype(np.int64, copy=False)


def expected_sq_error(values, centers):
    """Per-element variance of the stochastic rounding error.

    For x bracketed by (c_j, c_{j+1}) the rounding is a Bernoulli draw and
    the mean squared error is (x - c_j)(c_{j+1} - x); clamped values incur
    the deterministic squared distance to the end center.
    """
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    k = centers.shape[0]
    if k == 1:
        return (values - centers[0]) ** 2
    j = np.searchsorted(centers, values, side="right") - 1
    jc = np.clip(j, 0, k - 2)
    lo = centers[jc]
    hi = centers[jc + 1]
    out = (values - lo) * (hi - values)
    below = j < 0
    above = j >= k - 1
    out[below] = (values[below] - centers[0]) ** 2
    out[above] = (values[above] - centers[k - 1]) ** 2
    return out
