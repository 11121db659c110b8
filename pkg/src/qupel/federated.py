"""Simulated federated protocol with personalized quantized models.

Each of n clients holds a personalized model x_i, its own quantization
centers c_i (possibly of different length per client, i.e. different
precision), and a local copy w_i of the global model. Every simulated step,
every client performs one local alternating prox update; on steps divisible
by the synchronization gap tau (including step 0) the server first averages
the w_i in ascending client-id order and broadcasts the mean. The coupling
term lambda_p * (x_i - w_i) enters the client's weight gradient, and w_i is
then moved toward the fresh personalized model.

The w update descends the coupling penalty,
``w_i <- w_i + eta3 * lambda_p * (x_i - w_i)``; the penalty-ascending
variant is available behind ``flip_w_update_sign`` for comparison with the
alternative sign convention.

With lambda_p = 0 the w exchange cannot influence (x_i, c_i), and a QuPeL
run is bitwise-identical to independent centralized runs per client: the
same step kernels are invoked with the coupling term skipped entirely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .centralized import (
    DivergenceError,
    HyperParams,
    TrainResult,
    _grad_step_loss,
    _pin_assignments,
    _step_finetune,
    _step_xc,
    run_centralized,
    stationarity_gap,
)
from .diagnostics import RoundMetrics, evaluate_accuracy
from .losses import QuantLayout, eval_F_i_grouped, hard_quantize_grouped
from .quantizer import CenterVector
from .rng import Rng

__all__ = [
    "ClientState",
    "ServerState",
    "DiversityEstimate",
    "QupelResult",
    "client_local_step",
    "sync_round",
    "run_qupel",
    "run_fedavg",
    "run_local_only",
    "estimate_diversity",
]

logger = logging.getLogger(__name__)


@dataclass
class ClientState:
    """One client's personalized model, centers, local global-model copy and data."""

    id: int
    x: np.ndarray
    centers: list[CenterVector]
    w_local: np.ndarray
    loss: object
    layout: QuantLayout | None = None
    test: object | None = None
    data_rng: Rng | None = None
    pinned: list[np.ndarray] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.w_local = np.asarray(self.w_local, dtype=np.float64)
        if isinstance(self.centers, CenterVector):
            self.centers = [self.centers]
        if self.layout is None:
            self.layout = QuantLayout.full(self.loss.dim)
        if self.x.shape != (self.loss.dim,) or self.w_local.shape != self.x.shape:
            raise ValueError("client model and global copy must share the loss dimension")

    @property
    def m_values(self) -> tuple[int, ...]:
        return tuple(c.m for c in self.centers)


@dataclass
class ServerState:
    w_global: np.ndarray
    round: int = 0


@dataclass(frozen=True)
class DiversityEstimate:
    """Per-client squared deviation of the w-gradient from the mean, and its average."""

    kappa_i: np.ndarray
    kappa: float


def _coupling(cs: ClientState, hp: HyperParams):
    if hp.lambda_p == 0.0:
        return None
    return hp.lambda_p * (cs.x - cs.w_local)


def client_local_step(cs: ClientState, hp: HyperParams, t: int) -> ClientState:
    """One local update of (x_i, c_i, w_i); does not touch other clients."""
    grad_loss = _grad_step_loss(cs.loss, hp, cs.data_rng)
    gl = None if grad_loss is cs.loss else grad_loss
    x, centers, pinned = cs.x, cs.centers, cs.pinned
    if t == hp.ft_start() and pinned is None and cs.layout.groups:
        x, pinned = _pin_assignments(x, centers, cs.layout)
    coupling = _coupling(cs, hp)
    if pinned is None:
        x_new, centers_new = _step_xc(x, centers, cs.loss, cs.layout, hp, t,
                                      coupling=coupling, grad_loss=gl)
    else:
        x_new, centers_new = _step_finetune(x, centers, pinned, cs.loss, cs.layout, hp, t,
                                            coupling=coupling, grad_loss=gl)
    if hp.lambda_p == 0.0 or hp.eta3 == 0.0:
        w_new = cs.w_local
    elif hp.flip_w_update_sign:
        w_new = cs.w_local - hp.eta3 * hp.lambda_p * (x_new - cs.w_local)
    else:
        w_new = cs.w_local + hp.eta3 * hp.lambda_p * (x_new - cs.w_local)
    return replace(cs, x=x_new, centers=centers_new, w_local=w_new, pinned=pinned)


def sync_round(clients: list[ClientState], server: ServerState):
    """Average the local global-model copies (ascending id) and broadcast."""
    ordered = sorted(clients, key=lambda c: c.id)
    dims = {c.w_local.shape for c in ordered}
    if len(dims) != 1:
        raise ValueError("clients disagree on the global model dimension")
    w_mean = np.mean(np.stack([c.w_local for c in ordered]), axis=0)
    new_server = ServerState(w_global=w_mean, round=server.round + 1)
    new_clients = [replace(c, w_local=w_mean.copy()) for c in clients]
    return new_clients, new_server


def estimate_diversity(clients: list[ClientState], server: ServerState,
                       t: int, lambda_p: float) -> DiversityEstimate:
    """Spread of per-client w-gradients lambda_p * (w - x_i) around their mean."""
    ordered = sorted(clients, key=lambda c: c.id)
    grads = np.stack([lambda_p * (server.w_global - c.x) for c in ordered])
    mean = grads.mean(axis=0)
    kappa_i = np.array([float(np.sum((g - mean) ** 2)) for g in grads])
    return DiversityEstimate(kappa_i=kappa_i, kappa=float(np.mean(kappa_i)))


@dataclass
class QupelResult:
    per_client: list[TrainResult]
    global_history: list[dict]
    server: ServerState
    clients: list[ClientState]


def run_qupel(clients: list[ClientState], hp: HyperParams) -> QupelResult:
    """Run the personalized protocol for ``hp.steps`` steps.

    Every step performs one local update on every client (ascending id);
    steps divisible by tau first synchronize the w_i through the server,
    including step 0 so all clients start from a common global model. The
    returned per-client results carry the hard-quantized personalized
    models.
    """
    if not clients:
        raise ValueError("need at least one client")
    clients = sorted(clients, key=lambda c: c.id)
    server = ServerState(w_global=clients[0].w_local.copy(), round=0)
    cfg = hp.quant_cfg
    f0 = []
    for cs in clients:
        ev = eval_F_i_grouped(cs.loss, cs.x, cs.centers, cs.layout, cs.w_local,
                              cfg, hp.lam(0), hp.lambda_p)
        f0.append(ev.total)
    bounds = [hp.divergence_factor * max(1.0, abs(v)) for v in f0]
    histories: list[list[RoundMetrics]] = [[] for _ in clients]
    global_history: list[dict] = []

    for t in range(hp.steps):
        sync_dev = None
        if t % hp.tau == 0:
            clients, server = sync_round(clients, server)
            sync_dev = max(float(np.max(np.abs(c.w_local - server.w_global))) for c in clients)
        at_cadence = t % hp.metrics_every == 0 or t == hp.steps - 1

        new_clients = []
        for pos, cs in enumerate(clients):
            prev_x, prev_centers = cs.x, cs.centers
            new = client_local_step(cs, hp, t)
            ev = eval_F_i_grouped(new.loss, new.x, new.centers, new.layout, new.w_local,
                                  cfg, hp.lam(t), hp.lambda_p)
            if not np.isfinite(ev.total) or ev.total > bounds[pos]:
                raise DivergenceError(
                    f"client {new.id} diverged at step {t}: total={ev.total!r}"
                )
            gap = stationarity_gap(prev_x, new.x, prev_centers, new.centers, hp)
            q_err = float(np.sum(np.abs(new.x - hard_quantize_grouped(new.x, new.centers, new.layout))))
            drift = float(np.sum((new.w_local - server.w_global) ** 2))
            acc = None
            if new.test is not None and at_cadence:
                acc = evaluate_accuracy(new.loss, new.x, new.test)
            histories[pos].append(RoundMetrics(
                step=t, f_x=ev.f_x, f_q=ev.f_q, reg=ev.reg, prox_penalty=ev.prox_penalty,
                total=ev.total, stationarity_gap=gap, w_drift=drift, quant_error=q_err,
                test_acc=acc, kappa_round=None,
            ))
            new_clients.append(new)
        clients = new_clients

        record = {"step": t, "synced": sync_dev is not None, "post_sync_dev": sync_dev}
        w_stack = np.stack([c.w_local for c in clients])
        w_mean = w_stack.mean(axis=0)
        record["consensus_drift"] = float(np.mean(np.sum((w_stack - w_mean) ** 2, axis=1)))
        if at_cadence:
            div = estimate_diversity(clients, server, t, hp.lambda_p)
            record["kappa"] = div.kappa
            for pos, hist in enumerate(histories):
                hist[-1].kappa_round = float(div.kappa_i[pos])
            accs = [h[-1].test_acc for h in histories if h and h[-1].test_acc is not None]
            record["mean_test_acc"] = float(np.mean(accs)) if accs else None
        global_history.append(record)

    per_client = []
    for cs, hist in zip(clients, histories):
        x_hard = hard_quantize_grouped(cs.x, cs.centers, cs.layout)
        per_client.append(TrainResult(x_final=cs.x, centers_final=cs.centers,
                                      x_hard=x_hard, history=hist))
    return QupelResult(per_client=per_client, global_history=global_history,
                       server=server, clients=clients)


def run_local_only(clients: list[ClientState], hp: HyperParams) -> list[TrainResult]:
    """No-collaboration baseline: independent centralized runs per client."""
    results = []
    for cs in sorted(clients, key=lambda c: c.id):
        results.append(run_centralized(cs.loss, cs.x, cs.centers, hp,
                                       layout=cs.layout, test=cs.test, rng=cs.data_rng))
    return results


def run_fedavg(clients: list[ClientState], hp: HyperParams) -> TrainResult:
    """Full-precision FedAvg baseline on the plain client losses.

    Every step each client takes one gradient step on f_i from its local
    copy of the global model; steps divisible by tau first average the
    copies. The result holds the final averaged model (no quantization).
    """
    if not clients:
        raise ValueError("need at least one client")
    clients = sorted(clients, key=lambda c: c.id)
    w = [c.w_local.copy() for c in clients]
    history: list[RoundMetrics] = []
    for t in range(hp.steps):
        if t % hp.tau == 0:
            w_mean = np.mean(np.stack(w), axis=0)
            w = [w_mean.copy() for _ in clients]
        for i, cs in enumerate(clients):
            grad_loss = _grad_step_loss(cs.loss, hp, cs.data_rng)
            w[i] = w[i] - hp.eta1 * grad_loss.gradient(w[i])
        if t % hp.metrics_every == 0 or t == hp.steps - 1:
            w_mean = np.mean(np.stack(w), axis=0)
            mean_loss = float(np.mean([cs.loss.value(w_mean) for cs in clients]))
            accs = [evaluate_accuracy(cs.loss, w_mean, cs.test)
                    for cs in clients if cs.test is not None]
            acc = float(np.mean(accs)) if accs else None
            history.append(RoundMetrics(
                step=t, f_x=mean_loss, f_q=0.0, reg=0.0, prox_penalty=0.0,
                total=mean_loss, stationarity_gap=0.0, w_drift=0.0, quant_error=0.0,
                test_acc=acc, kappa_round=None,
            ))
            if not np.isfinite(mean_loss):
                raise DivergenceError(f"fedavg diverged at step {t}")
    w_final = np.mean(np.stack(w), axis=0)
    return TrainResult(x_final=w_final, centers_final=[], x_hard=w_final.copy(),
                       history=history)
