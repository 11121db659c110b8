"""Alternating proximal gradient training of weights and quantization centers.

One step alternates: (1) gradient of f(x) + f(Qs(x)) in x followed by the
soft-threshold prox, (2) gradient of f(Qs(x)) in the centers, evaluated at
the fresh x, followed by the surrogate center prox. A linear ramp may drive
the regularization weight, and an optional fine-tuning phase freezes the
quantized coordinates on their centers (tracking further center motion)
while exempt coordinates and the centers keep training. The returned model
is the hard-quantized final iterate.

Runs are single-threaded and deterministic: identical inputs produce
bitwise-identical results.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import RoundMetrics, evaluate_accuracy
from .losses import (
    QuantLayout,
    eval_F_i_grouped,
    hard_quantize_grouped,
    loss_quant_gradient_c,
    loss_quant_gradient_x,
    quantize_grouped,
)
from .proxops import ProxParams, prox_c, prox_x
from .quantizer import CenterVector, QuantConfig, quantize_assignments
from .rng import Rng

__all__ = [
    "LambdaSchedule",
    "HyperParams",
    "TrainResult",
    "DivergenceError",
    "centralized_step",
    "run_centralized",
    "stationarity_gap",
    "stationarity_gap_subgradient",
    "safe_step_sizes",
    "init_weights",
    "init_centers_from_weights",
]

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Raised when the objective blows past the divergence threshold."""


@dataclass(frozen=True)
class LambdaSchedule:
    """Regularization weight as a function of the step index.

    kinds: ``constant`` (always ``value``), ``linear`` (``base * t`` capped at
    ``cap``), ``piecewise`` (staircase over ``points`` = ((step, value), ...)).
    """

    kind: str = "constant"
    value: float = 0.0
    base: float = 0.0
    cap: float = float("inf")
    points: tuple[tuple[int, float], ...] = ()

    @classmethod
    def constant(cls, value: float) -> "LambdaSchedule":
        return cls(kind="constant", value=value)

    @classmethod
    def linear(cls, base: float, cap: float = float("inf")) -> "LambdaSchedule":
        return cls(kind="linear", base=base, cap=cap)

    @classmethod
    def piecewise(cls, points) -> "LambdaSchedule":
        pts = tuple((int(s), float(v)) for s, v in points)
        if not pts or pts[0][0] != 0:
            raise ValueError("piecewise schedule must start at step 0")
        return cls(kind="piecewise", points=pts)

    def lam(self, t: int) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "linear":
            return min(self.base * t, self.cap)
        if self.kind == "piecewise":
            out = self.points[0][1]
            for step, val in self.points:
                if t >= step:
                    out = val
            return out
        raise ValueError(f"unknown schedule kind: {self.kind}")


@dataclass(frozen=True)
class HyperParams:
    """Step sizes, schedules and sizes for a training run.

    ``eta2 = 0`` freezes the centers (used by the frozen-center baseline);
    ``eta3`` and ``lambda_p`` only matter to the federated protocol.
    ``fine_tune_start = None`` disables fine-tuning. ``eta2_decay`` is an
    optional staircase of multiplicative factors ((step, factor), ...).
    """

    eta1: float
    eta2: float
    steps: int
    eta3: float = 0.0
    lambda_schedule: LambdaSchedule = field(default_factory=lambda: LambdaSchedule.constant(0.0))
    lambda_p: float = 0.0
    tau: int = 1
    fine_tune_start: int | None = None
    quant_cfg: QuantConfig = field(default_factory=lambda: QuantConfig(hard_limit=True))
    eta2_decay: tuple[tuple[int, float], ...] | None = None
    divergence_factor: float = 1e6
    metrics_every: int = 1
    batch_size: int | None = None
    flip_w_update_sign: bool = False
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not (self.eta1 > 0 and np.isfinite(self.eta1)):
            raise ValueError("eta1 must be positive")
        if self.eta2 < 0 or self.eta3 < 0 or self.lambda_p < 0:
            raise ValueError("eta2, eta3 and lambda_p must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.tau < 1:
            raise ValueError("tau must be a positive integer")
        if self.fine_tune_start is not None and not (0 <= self.fine_tune_start <= self.steps):
            raise ValueError("fine_tune_start must lie in [0, steps]")
        if self.metrics_every < 1:
            raise ValueError("metrics_every must be >= 1")

    def lam(self, t: int) -> float:
        return self.lambda_schedule.lam(t)

    def eta2_at(self, t: int) -> float:
        if self.eta2_decay is None:
            return self.eta2
        factor = 1.0
        for step, f in self.eta2_decay:
            if t >= step:
                factor = f
        return self.eta2 * factor

    def ft_start(self) -> int:
        return self.steps if self.fine_tune_start is None else self.fine_tune_start

    def config_hash(self) -> str:
        blob = json.dumps(
            {
                "eta1": self.eta1, "eta2": self.eta2, "eta3": self.eta3,
                "lambda": [self.lambda_schedule.kind, self.lambda_schedule.value,
                           self.lambda_schedule.base, self.lambda_schedule.cap,
                           list(self.lambda_schedule.points)],
                "lambda_p": self.lambda_p, "tau": self.tau, "steps": self.steps,
                "fine_tune_start": self.fine_tune_start,
                "quant": [self.quant_cfg.sharpness, self.quant_cfg.hard_limit],
                "eta2_decay": list(self.eta2_decay) if self.eta2_decay else None,
                "batch_size": self.batch_size,
                "flip_w_update_sign": self.flip_w_update_sign,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainResult:
    """Final full-precision iterate, centers, hard-quantized model, history."""

    x_final: np.ndarray
    centers_final: list[CenterVector]
    x_hard: np.ndarray
    history: list[RoundMetrics]


# ---------------------------------------------------------------------------
# step kernels (shared verbatim by the centralized and federated trainers)


def _grad_step_loss(loss, hp: HyperParams, rng: Rng | None):
    """Loss used for gradients this step: full loss, or a minibatch view."""
    if hp.batch_size is None:
        return loss
    if rng is None:
        raise ValueError("minibatch mode needs an explicit rng")
    n = loss.n_samples
    b = min(hp.batch_size, n)
    idx = np.sort(rng.sample(n, b))
    return loss.subset(idx)


def _step_xc(x, centers, loss, layout, hp: HyperParams, t: int, coupling=None, grad_loss=None):
    """Alg. lines 2-5: prox-gradient in x, then in the centers."""
    gl = loss if grad_loss is None else grad_loss
    lam_t = hp.lam(t)
    eta2_t = hp.eta2_at(t)
    cfg = hp.quant_cfg

    g = gl.gradient(x) + loss_quant_gradient_x(gl, x, centers, layout, cfg)
    if coupling is not None:
        g = g + coupling
    y = x - hp.eta1 * g
    x_new = y.copy()
    px = ProxParams(eta=hp.eta1, lam=lam_t)
    for (start, stop), c in zip(layout.groups, centers):
        x_new[start:stop] = prox_x(y[start:stop], c, px)

    if eta2_t == 0.0:
        return x_new, list(centers)
    h_list = loss_quant_gradient_c(gl, x_new, centers, layout, cfg)
    pc = ProxParams(eta=eta2_t, lam=lam_t)
    centers_new = []
    for (start, stop), c, h in zip(layout.groups, centers, h_list):
        mu = c.values - eta2_t * h
        centers_new.append(prox_c(mu, x_new[start:stop], c, pc))
    return x_new, centers_new


def _step_finetune(x, centers, pinned, loss, layout, hp: HyperParams, t: int,
                   coupling=None, grad_loss=None):
    """Fine-tune step: quantized coords ride their assigned centers; the rest train on."""
    gl = loss if grad_loss is None else grad_loss
    lam_t = hp.lam(t)
    eta2_t = hp.eta2_at(t)
    cfg = hp.quant_cfg

    g = gl.gradient(x) + loss_quant_gradient_x(gl, x, centers, layout, cfg)
    if coupling is not None:
        g = g + coupling
    x_new = x - hp.eta1 * g
    for (start, stop), c, assign in zip(layout.groups, centers, pinned):
        x_new[start:stop] = c.values[assign]

    if eta2_t == 0.0:
        return x_new, list(centers)
    h_list = loss_quant_gradient_c(gl, x_new, centers, layout, cfg)
    pc = ProxParams(eta=eta2_t, lam=lam_t)
    centers_new = []
    for (start, stop), c, h, assign in zip(layout.groups, centers, h_list, pinned):
        mu = c.values - eta2_t * h
        c_new = prox_c(mu, x_new[start:stop], c, pc)
        centers_new.append(c_new)
        x_new[start:stop] = c_new.values[assign]
    return x_new, centers_new


def _pin_assignments(x, centers, layout):
    pinned = []
    x_new = np.array(x, dtype=np.float64)
    for (start, stop), c in zip(layout.groups, centers):
        assign = quantize_assignments(x_new[start:stop], c)
        pinned.append(assign)
        x_new[start:stop] = c.values[assign]
    return x_new, pinned


def centralized_step(state, loss, hp: HyperParams, t: int,
                     layout: QuantLayout | None = None):
    """One alternating prox-gradient step on (x, c); returns the new pair."""
    x, c = state
    single = isinstance(c, CenterVector)
    centers = [c] if single else list(c)
    if layout is None:
        layout = QuantLayout.full(loss.dim)
    x_new, centers_new = _step_xc(np.asarray(x, dtype=np.float64), centers, loss, layout, hp, t)
    return (x_new, centers_new[0] if single else centers_new)


def stationarity_gap(x_prev, x_next, c_prev, c_next, hp: HyperParams) -> float:
    """Prox-residual stationarity measure ||z_next - z_prev||^2 / min(eta)^2."""
    dx = np.asarray(x_next, dtype=np.float64) - np.asarray(x_prev, dtype=np.float64)
    total = float(dx @ dx)
    prevs = [c_prev] if isinstance(c_prev, CenterVector) else list(c_prev)
    nexts = [c_next] if isinstance(c_next, CenterVector) else list(c_next)
    for cp, cn in zip(prevs, nexts):
        dc = cn.values - cp.values
        total += float(dc @ dc)
    eta_min = hp.eta1 if hp.eta2 == 0 else min(hp.eta1, hp.eta2)
    return total / (eta_min * eta_min)


def stationarity_gap_subgradient(loss, x_next, c_prev, c_next, hp: HyperParams,
                                 t: int, layout: QuantLayout | None = None) -> float:
    """Explicit ||G||^2 using the ternary-sign subgradient of the regularizer.

    Secondary diagnostic only: the regularizer is nonsmooth, so no
    convergence statement is asserted on this measure.
    """
    if layout is None:
        layout = QuantLayout.full(loss.dim)
    prevs = [c_prev] if isinstance(c_prev, CenterVector) else list(c_prev)
    nexts = [c_next] if isinstance(c_next, CenterVector) else list(c_next)
    lam = hp.lam(t)
    cfg = hp.quant_cfg
    x_next = np.asarray(x_next, dtype=np.float64)

    gx = loss.gradient(x_next) + loss_quant_gradient_x(loss, x_next, prevs, layout, cfg)
    for (start, stop), c in zip(layout.groups, prevs):
        q = c.values[quantize_assignments(x_next[start:stop], c)]
        gx[start:stop] += lam * 0.5 * np.sign(x_next[start:stop] - q)
    total = float(gx @ gx)

    h_list = loss_quant_gradient_c(loss, x_next, nexts, layout, cfg)
    for (start, stop), c, h in zip(layout.groups, nexts, h_list):
        xg = x_next[start:stop]
        assign = quantize_assignments(xg, c)
        above = np.bincount(assign[xg > c.values[assign]], minlength=c.m)
        below = np.bincount(assign[xg < c.values[assign]], minlength=c.m)
        gc = h + lam * 0.5 * (below - above).astype(np.float64)
        total += float(gc @ gc)
    return total


def _write_checkpoint(path, step, x, centers, rng, hp):
    payload = {
        "step": step,
        "x": [float(v) for v in x],
        "c": [[float(v) for v in c.values] for c in centers],
        "rng_state": list(rng.getstate()) if rng is not None else None,
        "hyperparams_hash": hp.config_hash(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def run_centralized(loss, init_x, init_c, hp: HyperParams, *,
                    layout: QuantLayout | None = None, test=None, rng: Rng | None = None,
                    checkpoint_path=None) -> TrainResult:
    """Run the full alternating scheme for ``hp.steps`` steps.

    ``init_c`` may be a single CenterVector (whole-vector quantization) or a
    list matching ``layout.groups``. ``test`` enables accuracy metrics every
    ``hp.metrics_every`` steps for classifier losses. Aborts with
    DivergenceError when the objective exceeds ``divergence_factor`` times
    max(1, |F_0|).
    """
    if layout is None:
        layout = QuantLayout.full(loss.dim)
    centers = [init_c] if isinstance(init_c, CenterVector) else layout.check_centers(init_c)
    x = np.array(init_x, dtype=np.float64)
    if x.shape != (loss.dim,):
        raise ValueError("init_x dimension does not match the loss")

    cfg = hp.quant_cfg
    f0 = eval_F_i_grouped(loss, x, centers, layout, x, cfg, hp.lam(0), 0.0).total
    bound = hp.divergence_factor * max(1.0, abs(f0))
    ft_start = hp.ft_start()
    history: list[RoundMetrics] = []
    pinned = None

    for t in range(hp.steps):
        if t == ft_start and layout.groups:
            x, pinned = _pin_assignments(x, centers, layout)
        grad_loss = _grad_step_loss(loss, hp, rng)
        x_prev, centers_prev = x, centers
        if pinned is None:
            x, centers = _step_xc(x, centers, loss, layout, hp, t,
                                  grad_loss=None if grad_loss is loss else grad_loss)
        else:
            x, centers = _step_finetune(x, centers, pinned, loss, layout, hp, t,
                                        grad_loss=None if grad_loss is loss else grad_loss)

        ev = eval_F_i_grouped(loss, x, centers, layout, x, cfg, hp.lam(t), 0.0)
        if not np.isfinite(ev.total) or ev.total > bound:
            raise DivergenceError(
                f"objective diverged at step {t}: total={ev.total!r}, initial={f0!r}, "
                f"|x|={float(np.max(np.abs(x)))!r}"
            )
        gap = stationarity_gap(x_prev, x, centers_prev, centers, hp)
        q_err = float(np.sum(np.abs(x - hard_quantize_grouped(x, centers, layout))))
        acc = None
        if test is not None and (t % hp.metrics_every == 0 or t == hp.steps - 1):
            acc = evaluate_accuracy(loss, x, test)
        kappa = 0.0 if (t % hp.metrics_every == 0 or t == hp.steps - 1) else None
        history.append(RoundMetrics(
            step=t, f_x=ev.f_x, f_q=ev.f_q, reg=ev.reg, prox_penalty=0.0,
            total=ev.total, stationarity_gap=gap, w_drift=0.0, quant_error=q_err,
            test_acc=acc, kappa_round=kappa,
        ))
        if checkpoint_path is not None and hp.checkpoint_every:
            if (t + 1) % hp.checkpoint_every == 0:
                _write_checkpoint(checkpoint_path, t + 1, x, centers, rng, hp)

    x_hard = hard_quantize_grouped(x, centers, layout)
    return TrainResult(x_final=x, centers_final=centers, x_hard=x_hard, history=history)


# ---------------------------------------------------------------------------
# step-size estimation ("safe mode")


def _power_iteration(hvp, dim, rng: Rng, iters: int = 30) -> float:
    v = rng.normal(dim)
    v /= max(np.linalg.norm(v), 1e-12)
    eig = 0.0
    for _ in range(iters):
        w = hvp(v)
        nw = np.linalg.norm(w)
        if nw < 1e-14:
            return 0.0
        eig = float(v @ w)
        v = w / nw
    return abs(eig)


def safe_step_sizes(loss, x0, centers0, hp_template: HyperParams | None = None, *,
                    layout: QuantLayout | None = None, cfg: QuantConfig | None = None,
                    lambda_p: float = 0.0, seed: int = 314, n_probes: int = 3,
                    safety: float = 2.0) -> tuple[float, float]:
    """Estimate smoothness constants and return eta1 = 1/(2 Lx), eta2 = 1/(2 Lc).

    Curvature of x -> f(x) + f(Qs(x)) (plus the coupling strength 2*lambda_p
    in the federated case) and of c -> f(Qs(x)) is measured by power
    iteration on finite-difference Hessian-vector products of the analytic
    gradients, maximized over probe points, then inflated by ``safety``.
    Probes cover the start point, its hard-quantized image, random
    perturbations, and (in soft mode) points pushed onto the center
    midpoints where the quantizer's curvature peaks.
    """
    if cfg is None:
        cfg = hp_template.quant_cfg if hp_template is not None else QuantConfig(hard_limit=True)
    if layout is None:
        layout = QuantLayout.full(loss.dim)
    centers = [centers0] if isinstance(centers0, CenterVector) else list(centers0)
    rng = Rng(seed)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = 1e-5

    def grad_x(x):
        return loss.gradient(x) + loss_quant_gradient_x(loss, x, centers, layout, cfg)

    def grad_c_flat(cvals_list):
        cvs = [CenterVector(np.sort(v), c_max=c.c_max) for v, c in zip(cvals_list, centers)]
        return loss_quant_gradient_c(loss, x0, cvs, layout, cfg)

    probes = [x0, hard_quantize_grouped(x0, centers, layout)]
    probes += [x0 + 0.3 * rng.normal(x0.size) for _ in range(n_probes - 1)]
    if not cfg.hard_limit:
        for (start, stop), c in zip(layout.groups, centers):
            for mid in c.midpoints():
                p = x0.copy()
                # park the group on the sigmoid wall, slightly off its crest
                p[start:stop] = mid + 0.8 / cfg.sharpness
                probes.append(p)
    lx = 0.0
    for p in probes:
        def hvp(v, p=p):
            return (grad_x(p + eps * v) - grad_x(p - eps * v)) / (2 * eps)
        lx = max(lx, _power_iteration(hvp, x0.size, rng))
    lx = safety * lx + 2.0 * lambda_p
    eta1 = 1.0 / (2.0 * max(lx, 1e-9))

    lc = 0.0
    for gi, c in enumerate(centers):
        def hvp_c(v, gi=gi):
            vals = [c2.values.copy() for c2 in centers]
            up = [w.copy() for w in vals]
            dn = [w.copy() for w in vals]
            up[gi] = up[gi] + eps * v
            dn[gi] = dn[gi] - eps * v
            return (grad_c_flat(up)[gi] - grad_c_flat(dn)[gi]) / (2 * eps)
        lc = max(lc, _power_iteration(hvp_c, c.m, rng))
    lc = safety * lc
    eta2 = 1.0 / (2.0 * max(lc, 1e-9))
    return eta1, eta2


# ---------------------------------------------------------------------------
# initialization


def init_weights(dim: int, rng: Rng, scale: float = 0.5) -> np.ndarray:
    """Seeded uniform(-scale, scale) initialization of the parameter vector."""
    return rng.uniform(-scale, scale, dim)


def init_centers_from_weights(x_group: np.ndarray, m: int, c_max: float = 10.0) -> CenterVector:
    """Centers at the m empirical quantiles (j - 1/2)/m of the group's weights."""
    from .proxops import _strictly_increasing

    x_group = np.asarray(x_group, dtype=np.float64)
    qs = (np.arange(1, m + 1) - 0.5) / m
    vals = np.quantile(x_group, qs)
    vals = np.clip(vals, -c_max, c_max)
    # enforce strict sortedness for degenerate groups
    span = max(float(vals[-1] - vals[0]), 1e-3)
    for j in range(1, m):
        if vals[j] <= vals[j - 1]:
            vals[j] = min(vals[j - 1] + 1e-6 * span, c_max)
    return CenterVector(_strictly_increasing(vals, c_max), c_max=c_max)
