"""Training: score matching plus weighted concept supervision.

The per-step loss is

    L = L_score + gamma * L_concept

where L_score regresses the model score (minus the input gradient of the
composed energy) onto the exact Gaussian score of the forward process, and
L_concept is the summed per-concept cross-entropy of the heads under
true-label conditioning, batch-averaged.  Parameter gradients of L_score
require differentiating through the input gradient, which the engine
provides via double backprop.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .checkpoint import Checkpoint
from .diffengine import Tensor
from .diffusion import (
    NoiseSchedule,
    forward_noise,
    forward_noise_batch,
    target_score,
    target_score_batch,
)
from .energymodel import (
    ConceptAssignment,
    EnergyNetwork,
    NetConfig,
    composed_energy_graph,
    init_network,
    model_score,
)
from .synthworld import WorldConfig, oracle_label_batch, sample_prior

METRIC_FIELDS = ("step", "loss_score", "loss_concept", "loss_total", "concept_acc")


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good state."""

    def __init__(self, step: int, last_good: Checkpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1e-3
    lr: float = 1e-3
    batch_size: int = 128
    steps: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1000
    grad_check: bool = False  # finite-difference gradient verification per eval
    grad_check_coords: int = 20

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_manifest(self) -> dict:
        return {
            "gamma": self.gamma,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def batch_loss_graph(
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    v0: np.ndarray,
    labels: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    gamma: float,
):
    """Build the total-loss graph for one mini-batch.

    Returns (total, parts) where parts carries float loss components and the
    head accuracy of this batch.
    """
    B = v0.shape[0]
    vt = forward_noise_batch(schedule, v0, t, eps)
    target = target_score_batch(schedule, v0, vt, t)

    V = Tensor(vt, requires_grad=True)
    e_row, terms = composed_energy_graph(net, V, t, labels)
    (g_v,) = de.grad(de.tsum(e_row), [V], create_graph=True)
    score = de.neg(g_v)
    resid = de.sub(de.constant(target), score)
    loss_score = de.mul(0.5 / B, de.tsum(de.square(resid)))

    ce_sum = None
    hits = 0
    for k, (logits, e_k) in enumerate(terms):
        onehot = np.zeros(logits.value.shape)
        onehot[np.arange(B), labels[:, k]] = 1.0
        picked = de.tsum(de.mul(logits, de.constant(onehot)), axis=-1)
        ce_k = de.tsum(de.sub(e_k, picked))  # lse - logit[label], summed over batch
        ce_sum = ce_k if ce_sum is None else de.add(ce_sum, ce_k)
        hits += int(np.sum(np.argmax(logits.value, axis=1) == labels[:, k]))
    loss_concept = de.mul(1.0 / B, ce_sum)

    if gamma == 0.0:
        total = loss_score
    else:
        total = de.add(loss_score, de.mul(de.constant(gamma), loss_concept))

    parts = {
        "loss_score": float(loss_score.value),
        "loss_concept": float(loss_concept.value),
        "loss_total": float(total.value),
        "concept_acc": hits / (B * net.spec.K),
    }
    return total, parts


def score_matching_loss(
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    v0: np.ndarray,
    C: ConceptAssignment,
    t: int,
    eps: np.ndarray,
) -> float:
    """Half squared distance between the analytic target score and the
    model score at the noised latent."""
    vt = forward_noise(schedule, v0, t, eps)
    tgt = target_score(schedule, v0, vt, t)
    s = model_score(net, vt, t, C)
    return float(0.5 * np.sum((tgt - s) ** 2))


def concept_ce_loss(
    net: EnergyNetwork,
    v_t: np.ndarray,
    t,
    C,
    labels,
) -> float:
    """Summed per-concept cross-entropy under conditioning C, supervised by
    ``labels``; batch-averaged when given row-stacked inputs."""
    v_t = np.atleast_2d(np.asarray(v_t, dtype=np.float64))
    B = v_t.shape[0]
    cond = _as_label_matrix(C, B)
    sup = _as_label_matrix(labels, B)
    t_arr = np.full(B, t) if np.ndim(t) == 0 else np.asarray(t)

    from .energymodel import concept_term_graph

    V = de.constant(v_t)
    total = 0.0
    for k in range(net.spec.K):
        logits, e_k = concept_term_graph(net, V, t_arr, k, cond[:, k])
        picked = logits.value[np.arange(B), sup[:, k]]
        total += float(np.sum(e_k.value - picked))
    return total / B


def _as_label_matrix(C, B: int) -> np.ndarray:
    if isinstance(C, ConceptAssignment):
        return np.tile(np.asarray(C.values, dtype=np.int64), (B, 1))
    arr = np.asarray(C, dtype=np.int64)
    if arr.ndim == 1:
        return np.tile(arr, (B, 1))
    return arr


def total_loss(
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    v0: np.ndarray,
    C: ConceptAssignment,
    t: int,
    eps: np.ndarray,
    labels: ConceptAssignment,
    gamma: float,
) -> float:
    """L_score + gamma * L_concept for a single example."""
    l_score = score_matching_loss(net, schedule, v0, C, t, eps)
    if gamma == 0.0:
        return l_score
    vt = forward_noise(schedule, v0, t, eps)
    return l_score + gamma * concept_ce_loss(net, vt, t, C, labels)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard bias-corrected adaptive-moment optimizer."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.value) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.value) for name, t in params.items()}

    def step(self, params, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params.assign(name, params[name].value - self.lr * update)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    net: EnergyNetwork
    schedule: NoiseSchedule
    world: WorldConfig
    cfg: TrainConfig
    opt: Adam
    rng: np.random.Generator
    step: int = 0
    metrics: list = field(default_factory=list)


def init_train_state(
    world: WorldConfig,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    net_config: NetConfig | None = None,
) -> TrainState:
    if net_config is None:
        net_config = NetConfig(d=world.d, t_scale=schedule.T)
    net = init_network(world.spec, net_config, seed=cfg.seed)
    opt = Adam(net.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    return TrainState(net=net, schedule=schedule, world=world, cfg=cfg, opt=opt, rng=rng)


def draw_batch(state: TrainState):
    """Fresh prior batch with oracle labels, timesteps, and noise draws."""
    B, d = state.cfg.batch_size, state.world.d
    v0 = state.rng.normal(size=(B, d))
    labels = oracle_label_batch(state.world, v0)
    t = state.rng.integers(1, state.schedule.T + 1, size=B)
    eps = state.rng.normal(size=(B, d))
    return v0, labels, t, eps


def train_step(state: TrainState, batch) -> dict:
    """One optimization step; returns the loss breakdown."""
    v0, labels, t, eps = batch
    with de.checked(False):
        total, parts = batch_loss_graph(
            state.net, state.schedule, v0, labels, t, eps, state.cfg.gamma
        )
        if not np.isfinite(total.value):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        gs = de.grad(total, state.net.params.tensors())
        grads = {
            name: g.value for name, g in zip(state.net.params.names(), gs)
        }
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at step {state.step}")
        state.opt.step(state.net.params, grads)
    state.step += 1
    return parts


def verify_param_gradients(
    state: TrainState, batch, n_coords: int | None = None, h: float = 1e-5
) -> float:
    """Compare engine parameter gradients of the total loss against central
    finite differences on random coordinates; returns the max relative error.

    The finite-difference side recomputes the loss from scratch (analytic
    inner gradient, numeric outer difference), so it is independent of the
    double-backprop path it checks.
    """
    v0, labels, t, eps = batch
    cfg = state.cfg
    n_coords = n_coords or cfg.grad_check_coords

    total, _ = batch_loss_graph(state.net, state.schedule, v0, labels, t, eps, cfg.gamma)
    gs = de.grad(total, state.net.params.tensors())
    grads = {name: g.value for name, g in zip(state.net.params.names(), gs)}

    def loss_value() -> float:
        tot, _ = batch_loss_graph(
            state.net, state.schedule, v0, labels, t, eps, cfg.gamma
        )
        return float(tot.value)

    rng = np.random.default_rng(cfg.seed + 12345)
    names = state.net.params.names()
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        arr = state.net.params[name].value
        idx = tuple(rng.integers(s) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss_value()
        arr[idx] = orig - h
        down = loss_value()
        arr[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst


def train(
    world: WorldConfig,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    net_config: NetConfig | None = None,
    metric_log_path=None,
    progress: bool = False,
) -> Checkpoint:
    """Run the full loop; returns the final checkpoint (deterministic per seed)."""
    state = init_train_state(world, schedule, cfg, net_config)
    log_writer = None
    log_fh = None
    if metric_log_path is not None:
        log_fh = Path(metric_log_path).open("w", newline="")
        log_writer = csv.writer(log_fh)
        log_writer.writerow(METRIC_FIELDS)

    last_good = _snapshot(state)
    try:
        for _ in range(cfg.steps):
            batch = draw_batch(state)
            try:
                parts = train_step(state, batch)
            except FloatingPointError:
                raise TrainingDiverged(state.step, last_good) from None

            if state.step % cfg.eval_every == 0 or state.step == cfg.steps:
                if cfg.grad_check:
                    rel = verify_param_gradients(state, batch)
                    parts = dict(parts, grad_check_rel_err=rel)
                row = {"step": state.step, **parts}
                state.metrics.append(row)
                if log_writer is not None:
                    log_writer.writerow([row.get(f) for f in METRIC_FIELDS])
                    log_fh.flush()
                if progress:
                    print(
                        f"step {state.step}: total={parts['loss_total']:.4f} "
                        f"score={parts['loss_score']:.4f} "
                        f"concept={parts['loss_concept']:.4f} "
                        f"acc={parts['concept_acc']:.3f}"
                    )
                last_good = _snapshot(state)
    finally:
        if log_fh is not None:
            log_fh.close()
    return _snapshot(state)


def _snapshot(state: TrainState) -> Checkpoint:
    return Checkpoint(
        net=state.net.copy(),
        schedule=state.schedule,
        world=state.world,
        step=state.step,
        metrics=[dict(m) for m in state.metrics],
    )
