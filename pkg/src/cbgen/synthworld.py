"""Synthetic latent world: prior, analytic oracle labeler, glyph decoder.

The world stands in for a pretrained generator plus attribute labeler.
Latents are standard normal in R^d.  Each binary concept k is defined by a
unit direction a_k and threshold tau_k: the oracle labels concept k as 1
exactly when <a_k, v> > tau_k (boundary points get 0).  A deterministic
"glyph" decoder maps latents to bounded visual attributes, with concept
k's defining projection driving exactly one attribute so that concept
flips are visible.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .energymodel import ConceptAssignment, ConceptSpec

GLYPH_ATTRIBUTES = ("x", "y", "size", "elongation", "rotation", "hue")

DEFAULT_CONCEPT_NAMES = ("Round", "Tilted", "Large", "Warm")


@dataclass(frozen=True)
class Glyph:
    """Bounded visual attributes decoded from a latent."""

    x: float  # position, [-1, 1]
    y: float  # position, [-1, 1]
    size: float  # (0, 1]
    elongation: float  # [0, 1]
    rotation: float  # [-pi/2, pi/2]
    hue: float  # [0, 1]

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.size, self.elongation, self.rotation, self.hue]
        )

    def as_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name in GLYPH_ATTRIBUTES}


@dataclass(frozen=True)
class WorldConfig:
    d: int
    spec: ConceptSpec
    seed: int
    directions: np.ndarray  # (K, d), unit rows
    thresholds: np.ndarray  # (K,)
    attr_directions: np.ndarray  # (n_attrs, d); first K rows == directions
    attr_gain: float = 1.0  # squashing input scale

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=np.float64)
        thr = np.asarray(self.thresholds, dtype=np.float64)
        attrs = np.asarray(self.attr_directions, dtype=np.float64)
        if dirs.shape != (self.spec.K, self.d):
            raise ValueError(f"directions must be ({self.spec.K}, {self.d})")
        if thr.shape != (self.spec.K,):
            raise ValueError("one threshold per concept")
        norms = np.linalg.norm(dirs, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("concept directions must be unit-norm")
        if attrs.shape[1] != self.d:
            raise ValueError("attribute directions must live in R^d")
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "attr_directions", attrs)

    @property
    def n_attributes(self) -> int:
        return self.attr_directions.shape[0]

    @property
    def lipschitz_bound(self) -> float:
        """Bound on the glyph map's sensitivity: max attribute scale times
        gain times direction norm (tanh' <= 1)."""
        scales = np.array([1.0, 1.0, 0.475, 0.5, np.pi / 2, 0.5])[: self.n_attributes]
        norms = np.linalg.norm(self.attr_directions, axis=1)
        return float(np.max(scales * self.attr_gain * norms))

    def to_manifest(self) -> dict:
        return {
            "d": self.d,
            "spec": self.spec.to_manifest(),
            "seed": self.seed,
            "directions": self.directions.tolist(),
            "thresholds": self.thresholds.tolist(),
            "attr_directions": self.attr_directions.tolist(),
            "attr_gain": self.attr_gain,
        }

    @staticmethod
    def from_manifest(m: dict) -> "WorldConfig":
        return WorldConfig(
            d=int(m["d"]),
            spec=ConceptSpec.from_manifest(m["spec"]),
            seed=int(m["seed"]),
            directions=np.array(m["directions"], dtype=np.float64),
            thresholds=np.array(m["thresholds"], dtype=np.float64),
            attr_directions=np.array(m["attr_directions"], dtype=np.float64),
            attr_gain=float(m.get("attr_gain", 1.0)),
        )


def make_world(
    d: int = 8,
    concept_names=DEFAULT_CONCEPT_NAMES,
    seed: int = 0,
    thresholds=None,
    orthonormal: bool = True,
) -> WorldConfig:
    """Build a world with seeded concept directions.

    Orthonormal directions (default) make concepts independent under the
    prior; the non-orthogonal mode draws raw unit Gaussian directions to
    study entanglement.
    """
    spec = ConceptSpec.binary(concept_names)
    K = spec.K
    if d < K:
        import warnings

        warnings.warn(f"d={d} < K={K}: concepts cannot be mutually orthogonal")
    rng = np.random.default_rng(seed)
    n_attrs = max(len(GLYPH_ATTRIBUTES), K)
    raw = rng.normal(size=(max(n_attrs, K), d))
    if orthonormal and d >= K:
        q, _ = np.linalg.qr(raw[: min(d, n_attrs)].T)
        basis = q.T  # rows orthonormal
        # fix signs so the construction is stable across platforms
        signs = np.sign(np.sum(basis * raw[: basis.shape[0]], axis=1))
        signs[signs == 0] = 1.0
        basis = basis * signs[:, None]
        dirs = basis[:K]
        extra = basis[K:n_attrs]
        if extra.shape[0] < n_attrs - K:  # d too small for distinct attr rows
            pad = rng.normal(size=(n_attrs - K - extra.shape[0], d))
            pad /= np.linalg.norm(pad, axis=1, keepdims=True)
            extra = np.vstack([extra, pad]) if extra.size else pad
    else:
        dirs = raw[:K] / np.linalg.norm(raw[:K], axis=1, keepdims=True)
        extra = raw[K:n_attrs] / np.linalg.norm(raw[K:n_attrs], axis=1, keepdims=True)
    thr = np.zeros(K) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    attr_dirs = np.vstack([dirs, extra])[:n_attrs]
    return WorldConfig(
        d=d,
        spec=spec,
        seed=seed,
        directions=dirs,
        thresholds=thr,
        attr_directions=attr_dirs,
    )


def sample_prior(cfg: WorldConfig, seed: int, n: int | None = None) -> np.ndarray:
    """Standard normal latents, reproducible per seed.

    Returns shape (d,) when n is None, else (n, d).
    """
    rng = np.random.default_rng(seed)
    if n is None:
        return rng.normal(size=cfg.d)
    return rng.normal(size=(n, cfg.d))


def oracle_label(cfg: WorldConfig, v: np.ndarray) -> ConceptAssignment:
    """Analytic pseudo-labeler: concept k is 1 iff <a_k, v> strictly exceeds
    its threshold."""
    v = np.asarray(v, dtype=np.float64)
    proj = cfg.directions @ v
    return ConceptAssignment(tuple(int(p > t) for p, t in zip(proj, cfg.thresholds)))


def oracle_label_batch(cfg: WorldConfig, V: np.ndarray) -> np.ndarray:
    """Labels for rows of V; shape (n, K) of {0,1}."""
    V = np.asarray(V, dtype=np.float64)
    proj = V @ cfg.directions.T
    return (proj > cfg.thresholds[None, :]).astype(np.int64)


def _squash(z: np.ndarray) -> np.ndarray:
    return np.tanh(z)


def glyph_attributes(cfg: WorldConfig, V: np.ndarray) -> np.ndarray:
    """Bounded attribute vectors for rows of V (vectorized render_glyph)."""
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    z = _squash(cfg.attr_gain * (V @ cfg.attr_directions.T))
    n_attrs = cfg.n_attributes
    out = np.empty_like(z)
    # x, y in [-1, 1]
    out[:, 0] = z[:, 0]
    out[:, 1] = z[:, 1] if n_attrs > 1 else 0.0
    if n_attrs > 2:  # size in (0, 1], midpoint 0.525
        out[:, 2] = 0.525 + 0.475 * z[:, 2]
    if n_attrs > 3:  # elongation in [0, 1]
        out[:, 3] = 0.5 + 0.5 * z[:, 3]
    if n_attrs > 4:  # rotation in [-pi/2, pi/2]
        out[:, 4] = (np.pi / 2) * z[:, 4]
    if n_attrs > 5:  # hue in [0, 1]
        out[:, 5] = 0.5 + 0.5 * z[:, 5]
    if n_attrs > 6:  # auxiliary attributes for K > 6 worlds, in [-1, 1]
        out[:, 6:] = z[:, 6:]
    return out


def render_glyph(cfg: WorldConfig, v: np.ndarray) -> Glyph:
    """Deterministic decoding of one latent into visual attributes."""
    attrs = glyph_attributes(cfg, np.asarray(v, dtype=np.float64)[None, :])[0]
    return Glyph(*(float(a) for a in attrs[: len(GLYPH_ATTRIBUTES)]))


def make_dataset(
    cfg: WorldConfig, n: int, seed: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """n prior samples with oracle labels; (latents (n, d), labels (n, K))."""
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    V = sample_prior(cfg, cfg.seed if seed is None else seed, n)
    return V, oracle_label_batch(cfg, V)


def save_dataset(path, cfg: WorldConfig, V: np.ndarray, labels: np.ndarray) -> None:
    """CSV with one record per line (latents then labels); world config JSON
    saved alongside."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"v{i}" for i in range(cfg.d)] + [f"c_{name}" for name in cfg.spec.names]
        writer.writerow(header)
        for row, lab in zip(V, labels):
            writer.writerow([repr(float(x)) for x in row] + [int(c) for c in lab])
    cfg_path = path.with_suffix(".world.json")
    cfg_path.write_text(json.dumps(cfg.to_manifest(), sort_keys=True, indent=2) + "\n")


def load_dataset(path) -> tuple[WorldConfig, np.ndarray, np.ndarray]:
    path = Path(path)
    cfg = WorldConfig.from_manifest(json.loads(path.with_suffix(".world.json").read_text()))
    V, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            V.append([float(x) for x in row[: cfg.d]])
            labels.append([int(x) for x in row[cfg.d :]])
    return cfg, np.array(V), np.array(labels, dtype=np.int64)
