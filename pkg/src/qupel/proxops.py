"""Quantization regularizer and the two closed-form proximal operators.

The regularizer is half the l1 distance from each coordinate to its nearest
center. Its prox in the weights is a soft-thresholding step toward the
nearest center; its prox in the centers is solved through a first-order
surrogate around the previous centers, which nudges each center by
``lambda * eta / 2`` times the count imbalance of assigned weights strictly
above versus strictly below it (coordinates exactly on the center count in
neither set). The exact center-prox objective is also exposed for
monitoring, since the surrogate carries no error analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .quantizer import CenterVector, hard_quantize, quantize_assignments

__all__ = [
    "ProxParams",
    "regularizer",
    "prox_x",
    "prox_c",
    "exact_prox_c_objective",
]

logger = logging.getLogger(__name__)

_crossing_logged = False


def _warn_crossing():
    # first crossing at WARNING, the rest at DEBUG to avoid flooding long runs
    global _crossing_logged
    if _crossing_logged:
        logger.debug("center crossing: prox_c output required re-sorting")
    else:
        logger.warning("center crossing: prox_c output required re-sorting")
        _crossing_logged = True


@dataclass(frozen=True)
class ProxParams:
    """Step size eta and regularization weight lambda for one prox call."""

    eta: float
    lam: float

    def __post_init__(self):
        if not (self.eta > 0 and np.isfinite(self.eta)):
            raise ValueError("eta must be a positive finite real")
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError("lambda must be a nonnegative finite real")

    @property
    def threshold(self) -> float:
        return self.lam * self.eta / 2.0


def regularizer(x: np.ndarray, c: CenterVector) -> float:
    """R(x, c) = 1/2 * sum_i min_j |x_i - c_j|; zero iff x lies on the centers."""
    x = np.asarray(x, dtype=np.float64)
    q = hard_quantize(x, c)
    return 0.5 * float(np.sum(np.abs(x - q)))


def prox_x(y: np.ndarray, c: CenterVector, p: ProxParams) -> np.ndarray:
    """Soft-threshold each coordinate toward its nearest center.

    With q the nearest center and t = lambda * eta / 2: subtract t when
    y >= q + t, add t when y <= q - t, and snap to q otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    q = hard_quantize(y, c)
    t = p.threshold
    return np.where(y >= q + t, y - t, np.where(y <= q - t, y + t, q))


def _strictly_increasing(values: np.ndarray, c_max: float) -> np.ndarray:
    out = values.copy()
    for j in range(1, out.size):
        if out[j] <= out[j - 1]:
            out[j] = np.nextafter(out[j - 1], np.inf)
    if out[-1] > c_max:
        # collided against the upper bound; spread downward instead
        out[-1] = c_max
        for j in range(out.size - 2, -1, -1):
            if out[j] >= out[j + 1]:
                out[j] = np.nextafter(out[j + 1], -np.inf)
    return out


def prox_c(
    mu: np.ndarray,
    x_new: np.ndarray,
    c_prev: CenterVector,
    p: ProxParams,
) -> CenterVector:
    """First-order surrogate prox of the regularizer in the centers.

    Assignments are taken from ``hard_quantize(x_new, c_prev)`` (not
    recomputed at mu). With A_j / B_j counting assigned coordinates strictly
    above / strictly below the previous center (exact matches in neither),
    the linearized subgradient of the regularizer in c_j is
    ``(lambda/2) * (B_j - A_j)``, so component j moves by
    ``+lambda*eta/2 * (A_j - B_j)``: toward the median of its assigned
    weights. The result is clipped to the compact set ``[-c_max, c_max]``
    and re-sorted; a sort that permutes indices (center crossing) is logged
    as a warning, not an error.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != c_prev.values.shape:
        raise ValueError("mu must have one entry per center")
    assign = quantize_assignments(x_new, c_prev)
    x_new = np.asarray(x_new, dtype=np.float64)
    prev = c_prev.values
    m = c_prev.m
    above = np.bincount(assign[x_new > prev[assign]], minlength=m).astype(np.float64)
    below = np.bincount(assign[x_new < prev[assign]], minlength=m).astype(np.float64)
    new = mu + p.threshold * (above - below)
    new = np.clip(new, -c_prev.c_max, c_prev.c_max)
    order = np.argsort(new, kind="stable")
    if np.any(order != np.arange(m)):
        _warn_crossing()
        new = new[order]
    new = _strictly_increasing(new, c_prev.c_max)
    return CenterVector(new, c_max=c_prev.c_max)


def exact_prox_c_objective(
    c_candidate: np.ndarray,
    mu: np.ndarray,
    x_new: np.ndarray,
    p: ProxParams,
) -> float:
    """Exact (non-surrogate) center-prox objective value, for monitoring only.

    Evaluates ``1/(2 eta) * ||c - mu||^2 + lambda/2 * ||Q_c(x) - x||_1`` with
    nearest-center assignments recomputed at the candidate centers.
    """
    cand = np.sort(np.asarray(c_candidate, dtype=np.float64))
    if np.any(np.diff(cand) <= 0):
        cand = _strictly_increasing(cand, np.inf)
    cv = CenterVector(cand, c_max=max(np.max(np.abs(cand)), 1.0))
    mu = np.asarray(mu, dtype=np.float64)
    x_new = np.asarray(x_new, dtype=np.float64)
    quad = float(np.sum((cand - mu) ** 2)) / (2.0 * p.eta)
    dist = float(np.sum(np.abs(hard_quantize(x_new, cv) - x_new)))
    return quad + (p.lam / 2.0) * dist
