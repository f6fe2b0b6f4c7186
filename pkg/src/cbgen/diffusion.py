"""Forward noising process, noise schedules, and analytic score targets.

A schedule holds the cumulative signal retention ``alpha_bar[t]`` for
t = 0..T with ``alpha_bar[0] = 1`` (no noise).  The forward process is

    v_t = sqrt(alpha_bar_t) * v0 + sqrt(1 - alpha_bar_t) * eps

and the exact conditional score of that Gaussian,
``-(v_t - sqrt(alpha_bar_t) v0) / (1 - alpha_bar_t)``, is the regression
target for score matching.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine")

# linear-beta endpoints (classic DDPM values)
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
COSINE_S = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise schedule; immutable and freely shareable."""

    kind: str
    T: int
    alpha_bar: np.ndarray = field(repr=False)  # shape (T+1,), alpha_bar[0] == 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have shape ({self.T + 1},)")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if ab[-1] <= 0.0:
            raise ValueError("alpha_bar[T] must stay positive")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "T": self.T}

    @staticmethod
    def from_manifest(m: dict) -> "NoiseSchedule":
        return make_schedule(m["kind"], m["T"])


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """Build a schedule of the given kind with T noising steps."""
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    if kind == "linear":
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = COSINE_S
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1 + s) * np.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        alpha_bar[0] = 1.0
        # keep the tail strictly positive and the sequence strictly decreasing
        alpha_bar = np.clip(alpha_bar, 1e-8, 1.0)
        for i in range(1, T + 1):
            if alpha_bar[i] >= alpha_bar[i - 1]:
                alpha_bar[i] = np.nextafter(alpha_bar[i - 1], 0.0)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; options: {SCHEDULE_KINDS}")
    return NoiseSchedule(kind=kind, T=T, alpha_bar=alpha_bar)


def _check_t(schedule: NoiseSchedule, t: int, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not (lo <= t <= schedule.T):
        raise ValueError(f"timestep {t} outside [{lo}, {schedule.T}]")


def forward_noise(
    schedule: NoiseSchedule, v0: np.ndarray, t: int, eps: np.ndarray
) -> np.ndarray:
    """Noise a clean latent to timestep t with the given unit Gaussian draw.

    t = 0 is allowed and returns v0 exactly.
    """
    _check_t(schedule, t, allow_zero=True)
    v0 = np.asarray(v0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if v0.shape != eps.shape:
        raise ValueError(f"v0 {v0.shape} and eps {eps.shape} must match")
    ab = schedule.alpha_bar[t]
    if ab == 1.0:
        return v0.copy()  # bitwise passthrough at alpha_bar = 1
    return np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * eps


def forward_noise_batch(
    schedule: NoiseSchedule, v0: np.ndarray, t: np.ndarray, eps: np.ndarray
) -> np.ndarray:
    """Vectorized forward_noise with a per-row timestep array."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError("timesteps outside [1, T]")
    ab = schedule.alpha_bar[t][:, None]
    return np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * eps


def target_score(
    schedule: NoiseSchedule, v0: np.ndarray, v_t: np.ndarray, t: int
) -> np.ndarray:
    """Exact score of q(v_t | v0): the gradient of the Gaussian log-density."""
    _check_t(schedule, t)
    ab = schedule.alpha_bar[t]
    if ab >= 1.0:
        raise ValueError("target_score undefined at alpha_bar = 1 (zero variance)")
    v0 = np.asarray(v0, dtype=np.float64)
    v_t = np.asarray(v_t, dtype=np.float64)
    return -(v_t - np.sqrt(ab) * v0) / (1.0 - ab)


def target_score_batch(
    schedule: NoiseSchedule, v0: np.ndarray, v_t: np.ndarray, t: np.ndarray
) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError("timesteps outside [1, T]")
    ab = schedule.alpha_bar[t][:, None]
    return -(v_t - np.sqrt(ab) * v0) / (1.0 - ab)
