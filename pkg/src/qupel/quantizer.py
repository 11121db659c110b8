"""Scalar soft/hard quantizers with analytic partial derivatives.

The soft quantizer is a sigmoid staircase over a sorted vector of centers
``c_1 < ... < c_m``:

    Qs(x)_i = c_1 + sum_{j=2..m} (c_j - c_{j-1}) * sigmoid(P * (x_i - (c_j + c_{j-1}) / 2))

``P`` controls the sharpness: for small P the map is nearly affine, for large
P it approaches the nearest-center (hard) quantizer. The hard quantizer maps
each coordinate to its nearest center, breaking exact midpoint ties toward
the smaller center so results are deterministic.

All functions here are pure and thread-safe; none mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CenterVector",
    "QuantConfig",
    "sigmoid",
    "sigmoid_prime",
    "soft_quantize",
    "hard_quantize",
    "quantize_assignments",
    "grad_soft_quantize_x",
    "grad_soft_quantize_c",
    "hard_grad_c",
]

DEFAULT_C_MAX = 10.0


def sigmoid(t: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (no overflow at large |t|)."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_prime(t: np.ndarray) -> np.ndarray:
    s = sigmoid(t)
    return s * (1.0 - s)


@dataclass(frozen=True)
class CenterVector:
    """Sorted quantization centers for one parameter group.

    Invariants: strictly increasing, finite, bounded by ``c_max`` in absolute
    value, and m >= 1. ``log2(m)`` is the number of bits per parameter.
    """

    values: np.ndarray
    c_max: float = DEFAULT_C_MAX

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("centers must be a nonempty 1-d vector")
        if not np.all(np.isfinite(vals)):
            raise ValueError("centers must be finite")
        if np.any(np.diff(vals) <= 0):
            raise ValueError("centers must be strictly sorted ascending")
        if self.c_max <= 0 or not np.isfinite(self.c_max):
            raise ValueError("c_max must be a positive finite real")
        if np.any(np.abs(vals) > self.c_max):
            raise ValueError(f"centers must lie in [-{self.c_max}, {self.c_max}]")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def m(self) -> int:
        return int(self.values.size)

    @property
    def bits(self) -> float:
        return float(np.log2(self.m))

    def midpoints(self) -> np.ndarray:
        return (self.values[1:] + self.values[:-1]) / 2.0


@dataclass(frozen=True)
class QuantConfig:
    """Soft-quantizer sharpness P plus the P-to-infinity switch.

    With ``hard_limit`` set, P is ignored: the quantizer is the exact
    nearest-center map, its x-derivative is taken as zero, and its
    c-derivative becomes an indicator sum over assigned coordinates.
    """

    sharpness: float = 1.0
    hard_limit: bool = False

    def __post_init__(self):
        if not (self.sharpness > 0 and np.isfinite(self.sharpness)):
            raise ValueError("sharpness P must be a positive finite real")


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a 1-d parameter vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in input vector")
    return x


def soft_quantize(x: np.ndarray, c: CenterVector, cfg: QuantConfig) -> np.ndarray:
    """Differentiable sigmoid-staircase quantization of each coordinate."""
    if cfg.hard_limit:
        raise ValueError("soft_quantize requires hard_limit=False")
    x = _check_input(x)
    v = c.values
    if c.m == 1:
        return np.full_like(x, v[0])
    mids = c.midpoints()
    widths = np.diff(v)
    s = sigmoid(cfg.sharpness * (x[:, None] - mids[None, :]))
    return v[0] + s @ widths


def quantize_assignments(x: np.ndarray, c: CenterVector) -> np.ndarray:
    """Index of the nearest center per coordinate; midpoint ties take the smaller center."""
    x = _check_input(x)
    if c.m == 1:
        return np.zeros(x.size, dtype=np.int64)
    # side='left' sends a coordinate exactly at a midpoint to the lower cell
    return np.searchsorted(c.midpoints(), x, side="left").astype(np.int64)


def hard_quantize(x: np.ndarray, c: CenterVector) -> np.ndarray:
    return c.values[quantize_assignments(x, c)]


def grad_soft_quantize_x(x: np.ndarray, c: CenterVector, cfg: QuantConfig) -> np.ndarray:
    """Diagonal of the soft-quantizer Jacobian w.r.t. x.

    Entry i equals ``P * sum_j (c_j - c_{j-1}) * sigmoid'(P * (x_i - mid_j))``,
    which is nonnegative and bounded by ``P * (c_m - c_1) / 4``.
    """
    if cfg.hard_limit:
        raise ValueError("grad_soft_quantize_x requires hard_limit=False")
    x = _check_input(x)
    v = c.values
    if c.m == 1:
        return np.zeros_like(x)
    mids = c.midpoints()
    widths = np.diff(v)
    sp = sigmoid_prime(cfg.sharpness * (x[:, None] - mids[None, :]))
    return cfg.sharpness * (sp @ widths)


def grad_soft_quantize_c(x: np.ndarray, c: CenterVector, cfg: QuantConfig) -> np.ndarray:
    """Jacobian of the soft quantizer w.r.t. the centers, shape (m, d).

    Entry (j, i) collects the sigmoid of the midpoint shared with the center
    below, minus the sigmoid of the midpoint shared with the center above,
    minus the two midpoint-width corrections. Boundary rows use the natural
    conventions sigmoid(+inf) = 1 below c_1 and sigmoid(-inf) = 0 above c_m.
    For m = 1 the quantizer is identically c_1, so the Jacobian is a row of
    ones.
    """
    if cfg.hard_limit:
        raise ValueError("grad_soft_quantize_c requires hard_limit=False")
    x = _check_input(x)
    v = c.values
    m, d = c.m, x.size
    if m == 1:
        return np.ones((1, d))
    P = cfg.sharpness
    mids = c.midpoints()
    widths = np.diff(v)
    arg = P * (x[None, :] - mids[:, None])  # (m-1, d)
    s = sigmoid(arg)
    sp = s * (1.0 - s)
    jac = np.zeros((m, d))
    jac[0, :] = 1.0          # sigma(+inf) term for the lowest center
    jac[1:, :] += s          # midpoint shared with the center below
    jac[:-1, :] -= s         # midpoint shared with the center above
    width_term = (P / 2.0) * widths[:, None] * sp
    jac[:-1, :] -= width_term
    jac[1:, :] -= width_term
    return jac


def hard_grad_c(assignments: np.ndarray, upstream_grad: np.ndarray, m: int) -> np.ndarray:
    """P-to-infinity center gradient: sum upstream entries per assigned center."""
    assignments = np.asarray(assignments, dtype=np.int64)
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if assignments.shape != upstream_grad.shape:
        raise ValueError("assignments and upstream gradient differ in length")
    if m < 1:
        raise ValueError("m must be >= 1")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= m):
        raise ValueError("assignment index out of range")
    return np.bincount(assignments, weights=upstream_grad, minlength=m).astype(np.float64)
