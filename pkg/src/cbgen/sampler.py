"""Inference-time sampling: annealed gradient descent on intervention energy.

Starting from unit Gaussian noise, the latent is updated with

    v  <-  v - eta * grad_v E_interv(v; targets, weights, t)

while the timestep condition anneals from high noise (t = T) down to t = 1,
with a fixed number of inner steps per timestep.  Pure descent is the
default; optional Langevin noise sqrt(2 eta) * scale * N(0, I) exists for
mode-coverage studies.  Gradients are norm-clipped (default 100) to survive
early-training landscapes; clips are counted in the trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import Tensor
from .diffusion import NoiseSchedule
from .energymodel import (
    ACTIVE,
    NEGATED,
    NEUTRAL,
    ConceptSpec,
    EnergyNetwork,
    InterventionSpec,
    intervention_energy_graph,
)


@dataclass(frozen=True)
class SamplerConfig:
    steps_per_timestep: int = 2
    eta: float = 0.05
    eta_decay: str = "none"  # "none" or "cosine"
    t_end: int = 1
    noise_scale: float = 0.0
    seed: int = 0
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("step size eta must be > 0")
        if self.steps_per_timestep < 1:
            raise ValueError("steps_per_timestep must be >= 1")
        if self.eta_decay not in ("none", "cosine"):
            raise ValueError(f"unknown eta decay {self.eta_decay!r}")

    def to_manifest(self) -> dict:
        return {
            "steps_per_timestep": self.steps_per_timestep,
            "eta": self.eta,
            "eta_decay": self.eta_decay,
            "t_end": self.t_end,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "clip_norm": self.clip_norm,
        }


@dataclass(frozen=True)
class TrajectoryPoint:
    t: int
    latent: np.ndarray
    energy: float
    per_concept: dict[str, float]


@dataclass
class Trajectory:
    """Chronological record of one sampling run; the last point holds the
    final latent."""

    points: list[TrajectoryPoint] = field(default_factory=list)
    clipped_updates: int = 0

    @property
    def final_latent(self) -> np.ndarray:
        return self.points[-1].latent

    def __len__(self) -> int:
        return len(self.points)


def init_latent(d: int, seed: int, n: int | None = None) -> np.ndarray:
    """Seeded standard-normal starting noise; (d,) or (n, d)."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=cfg_shape(d, n))


def cfg_shape(d: int, n: int | None):
    return (d,) if n is None else (n, d)


# ---------------------------------------------------------------------------
# Spec builders
# ---------------------------------------------------------------------------


def activate(concept, value: int = 1):
    return (ACTIVE, concept, value)


def negate(concept, value: int = 1):
    return (NEGATED, concept, value)


def neutral(concept):
    return (NEUTRAL, concept, None)


def compose(
    spec: ConceptSpec,
    items,
    w_pos: float | None = None,
    w_neg: float | None = None,
    negation_mode: str | None = None,
) -> InterventionSpec:
    """Build an InterventionSpec from activate/negate/neutral terms.

    Unlisted concepts stay neutral.  Duplicate concepts and empty builder
    lists are rejected.
    """
    items = list(items)
    if not items:
        raise ValueError("intervention needs at least one term")
    states = [NEUTRAL] * spec.K
    targets: list[int | None] = [None] * spec.K
    seen: set[int] = set()
    for state, concept, value in items:
        k = concept if isinstance(concept, int) else spec.index_of(concept)
        if k in seen:
            raise ValueError(f"concept {spec.names[k]!r} listed twice")
        seen.add(k)
        states[k] = state
        targets[k] = None if state == NEUTRAL else int(value)
    kw = {}
    if w_pos is not None:
        kw["w_pos"] = w_pos
    if w_neg is not None:
        kw["w_neg"] = w_neg
    if negation_mode is not None:
        kw["negation_mode"] = negation_mode
    out = InterventionSpec(states=tuple(states), targets=tuple(targets), **kw)
    out.validate(spec)
    return out


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def intervention_grad_batch(
    net: EnergyNetwork,
    V_np: np.ndarray,
    t: int,
    spec: InterventionSpec,
    targets_per_row: np.ndarray | None = None,
):
    """Gradient of the intervention energy for each row, plus energy values.

    Returns (grad (B, d), energies (B,), per-concept energies dict).
    """
    V = Tensor(np.asarray(V_np, dtype=np.float64), requires_grad=True)
    e_row, per_concept = intervention_energy_graph(
        net, V, np.full(V.value.shape[0], t), spec, targets_per_row
    )
    (g,) = de.grad(de.tsum(e_row), [V])
    if not np.all(np.isfinite(g.value)):
        raise FloatingPointError(f"non-finite intervention gradient at t={t}")
    per = {k: e.value.copy() for k, e in per_concept.items()}
    return g.value, e_row.value.copy(), per


def descent_update(v: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    """The core affine update: exactly v - eta * g."""
    return v - eta * g


def intervention_step(
    net: EnergyNetwork, v: np.ndarray, t: int, spec: InterventionSpec, eta: float
) -> np.ndarray:
    """One plain descent update v - eta * grad (no clipping, no noise)."""
    v = np.asarray(v, dtype=np.float64)
    g, _, _ = intervention_grad_batch(net, v[None, :], t, spec)
    return descent_update(v, g[0], eta)


def _eta_at(cfg: SamplerConfig, frac_done: float) -> float:
    if cfg.eta_decay == "cosine":
        return cfg.eta * 0.5 * (1.0 + np.cos(np.pi * frac_done))
    return cfg.eta


def run_sampler_batch(
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    spec: InterventionSpec,
    cfg: SamplerConfig,
    n: int,
    init: np.ndarray | None = None,
    targets_per_row: np.ndarray | None = None,
    record: bool = False,
):
    """Anneal t from T down to t_end with cfg.steps_per_timestep updates each.

    Returns (final latents (n, d), list of per-update records or None,
    clipped update count).  Records hold the pre-update state; a final
    record at t_end holds the finished latents.
    """
    spec.validate(net.spec)
    d = net.config.d
    rng = np.random.default_rng(cfg.seed)
    V = init_latent(d, cfg.seed, n) if init is None else np.array(init, dtype=np.float64)
    if V.shape != (n, d):
        raise ValueError(f"init must have shape ({n}, {d})")

    t_values = list(range(schedule.T, cfg.t_end - 1, -1))
    total_updates = len(t_values) * cfg.steps_per_timestep
    records = [] if record else None
    clipped = 0

    done = 0
    for t in t_values:
        for _ in range(cfg.steps_per_timestep):
            g, e_row, per = intervention_grad_batch(net, V, t, spec, targets_per_row)
            if record:
                records.append((t, V.copy(), e_row, per))
            norms = np.linalg.norm(g, axis=1)
            mask = norms > cfg.clip_norm
            if np.any(mask):
                clipped += int(mask.sum())
                g = g.copy()
                g[mask] *= (cfg.clip_norm / norms[mask])[:, None]
            eta_t = _eta_at(cfg, done / max(total_updates, 1))
            V = descent_update(V, g, eta_t)
            if cfg.noise_scale > 0.0:
                V = V + np.sqrt(2.0 * eta_t) * cfg.noise_scale * rng.normal(size=V.shape)
            done += 1

    if record:
        _, e_row, per = _energies_only(net, V, cfg.t_end, spec, targets_per_row)
        records.append((cfg.t_end, V.copy(), e_row, per))
    return V, records, clipped


def _energies_only(net, V, t, spec, targets_per_row):
    g, e_row, per = intervention_grad_batch(net, V, t, spec, targets_per_row)
    return g, e_row, per


def run_sampler(
    net: EnergyNetwork,
    schedule: NoiseSchedule,
    spec: InterventionSpec,
    cfg: SamplerConfig,
) -> Trajectory:
    """Single-latent sampling; the trajectory records every update."""
    V, records, clipped = run_sampler_batch(net, schedule, spec, cfg, n=1, record=True)
    names = net.spec.names
    points = [
        TrajectoryPoint(
            t=int(t),
            latent=v[0].copy(),
            energy=float(e[0]),
            per_concept={names[k]: float(vals[0]) for k, vals in per.items()},
        )
        for t, v, e, per in records
    ]
    return Trajectory(points=points, clipped_updates=clipped)


# ---------------------------------------------------------------------------
# Trajectory export (JSON lines, one record per step)
# ---------------------------------------------------------------------------


def trajectory_records(traj: Trajectory) -> list[dict]:
    return [
        {
            "step": i,
            "t": p.t,
            "latent": [float(x) for x in p.latent],
            "energy": p.energy,
            "per_concept": p.per_concept,
        }
        for i, p in enumerate(traj.points)
    ]


def save_trajectory_jsonl(path, traj: Trajectory) -> None:
    with Path(path).open("w") as fh:
        for rec in trajectory_records(traj):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trajectory_jsonl(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]
