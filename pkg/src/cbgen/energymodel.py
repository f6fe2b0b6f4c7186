"""Concept-conditioned energy network.

The network embeds a latent vector, a timestep, and one (concept, value)
token, runs a small smooth-activation trunk, and emits one logit head per
concept.  LogSumExp of a head's logits is that concept's energy; the sum
of per-concept energies is the composed energy driving generation, and a
weighted sum of them realizes user interventions (activate weight +1,
negate weight -0.001 by default).  Softmax over the same logits provides
concept prediction, so classification supervision and energy-based
inference share one set of heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import ParameterSet, Tensor

W_ACTIVATE_DEFAULT = 1.0
W_NEGATE_DEFAULT = -0.001

ACTIVE = "active"
NEGATED = "negated"
NEUTRAL = "neutral"
_STATES = (ACTIVE, NEGATED, NEUTRAL)

NEGATION_WEIGHTED = "weighted"  # keep the value token, apply w-
NEGATION_VALUE_FLIP = "value_flip"  # ablation: complementary token, w+


# ---------------------------------------------------------------------------
# Concept bookkeeping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConceptSpec:
    """Names and cardinalities of the concept set."""

    names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.names) < 1:
            raise ValueError("need at least one concept")
        if len(set(self.names)) != len(self.names):
            raise ValueError("concept names must be unique")
        if len(self.names) != len(self.cardinalities):
            raise ValueError("names and cardinalities must align")
        if any(c < 2 for c in self.cardinalities):
            raise ValueError("concept cardinality must be >= 2")

    @property
    def K(self) -> int:
        return len(self.names)

    @property
    def token_offsets(self) -> tuple[int, ...]:
        """Row offset of each concept's value tokens in the embedding table."""
        offs, acc = [], 0
        for c in self.cardinalities:
            offs.append(acc)
            acc += c
        return tuple(offs)

    @property
    def total_tokens(self) -> int:
        return sum(self.cardinalities)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(
                f"unknown concept {name!r}; valid names: {', '.join(self.names)}"
            ) from None

    def check_value(self, k: int, value: int) -> None:
        if not (0 <= k < self.K):
            raise IndexError(f"concept index {k} outside [0, {self.K})")
        if not (0 <= value < self.cardinalities[k]):
            raise ValueError(
                f"value {value} invalid for concept {self.names[k]!r} "
                f"(cardinality {self.cardinalities[k]})"
            )

    @staticmethod
    def binary(names) -> "ConceptSpec":
        names = tuple(names)
        return ConceptSpec(names=names, cardinalities=(2,) * len(names))

    def to_manifest(self) -> dict:
        return {"names": list(self.names), "cardinalities": list(self.cardinalities)}

    @staticmethod
    def from_manifest(m: dict) -> "ConceptSpec":
        return ConceptSpec(tuple(m["names"]), tuple(m["cardinalities"]))


@dataclass(frozen=True)
class ConceptAssignment:
    """One discrete value per concept."""

    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))

    def validate(self, spec: ConceptSpec) -> None:
        if len(self.values) != spec.K:
            raise ValueError(f"assignment has {len(self.values)} values, spec has K={spec.K}")
        for k, v in enumerate(self.values):
            spec.check_value(k, v)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class InterventionSpec:
    """Per-concept intervention: activate/negate with a value, or stay neutral.

    Neutral concepts contribute nothing.  Active concepts contribute their
    per-concept energy with weight w_pos (default +1); negated concepts keep
    their value token and contribute with weight w_neg (default -0.001).
    The value-flip negation mode (complementary token, weight w_pos) exists
    for ablation.
    """

    states: tuple[str, ...]
    targets: tuple[int | None, ...]
    weight_overrides: tuple[float | None, ...] = None  # type: ignore[assignment]
    w_pos: float = W_ACTIVATE_DEFAULT
    w_neg: float = W_NEGATE_DEFAULT
    negation_mode: str = NEGATION_WEIGHTED

    def __post_init__(self):
        states = tuple(self.states)
        targets = tuple(self.targets)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "targets", targets)
        if self.weight_overrides is None:
            object.__setattr__(self, "weight_overrides", (None,) * len(states))
        else:
            object.__setattr__(self, "weight_overrides", tuple(self.weight_overrides))
        if len(targets) != len(states) or len(self.weight_overrides) != len(states):
            raise ValueError("states, targets and weight_overrides must align")
        for s, t in zip(states, targets):
            if s not in _STATES:
                raise ValueError(f"unknown intervention state {s!r}")
            if s == NEUTRAL and t is not None:
                raise ValueError("neutral concepts cannot carry a target value")
            if s != NEUTRAL and t is None:
                raise ValueError(f"{s} concepts need a target value")
        if self.negation_mode not in (NEGATION_WEIGHTED, NEGATION_VALUE_FLIP):
            raise ValueError(f"unknown negation mode {self.negation_mode!r}")

    @property
    def K(self) -> int:
        return len(self.states)

    def validate(self, spec: ConceptSpec) -> None:
        if self.K != spec.K:
            raise ValueError(f"spec has {self.K} entries, concept spec has K={spec.K}")
        for k, (s, t) in enumerate(zip(self.states, self.targets)):
            if s != NEUTRAL:
                spec.check_value(k, t)
        if all(s == NEUTRAL for s in self.states):
            raise ValueError("intervention needs at least one non-neutral concept")

    def terms(self, spec: ConceptSpec) -> list[tuple[int, int, float]]:
        """Effective (concept index, value token, weight) triples, in concept order."""
        self.validate(spec)
        out = []
        for k, (s, t, w) in enumerate(zip(self.states, self.targets, self.weight_overrides)):
            if s == NEUTRAL:
                continue
            if s == ACTIVE:
                out.append((k, t, self.w_pos if w is None else w))
            elif self.negation_mode == NEGATION_WEIGHTED:
                out.append((k, t, self.w_neg if w is None else w))
            else:
                if spec.cardinalities[k] != 2:
                    raise ValueError("value-flip negation needs binary concepts")
                out.append((k, 1 - t, self.w_pos if w is None else w))
        return out

    @staticmethod
    def all_active(assignment: ConceptAssignment, **kw) -> "InterventionSpec":
        vals = assignment.values
        return InterventionSpec(
            states=(ACTIVE,) * len(vals), targets=tuple(vals), **kw
        )

    def to_manifest(self) -> dict:
        return {
            "states": list(self.states),
            "targets": list(self.targets),
            "weight_overrides": list(self.weight_overrides),
            "w_pos": self.w_pos,
            "w_neg": self.w_neg,
            "negation_mode": self.negation_mode,
        }

    @staticmethod
    def from_manifest(m: dict) -> "InterventionSpec":
        return InterventionSpec(
            states=tuple(m["states"]),
            targets=tuple(m["targets"]),
            weight_overrides=tuple(m.get("weight_overrides") or (None,) * len(m["states"])),
            w_pos=float(m.get("w_pos", W_ACTIVATE_DEFAULT)),
            w_neg=float(m.get("w_neg", W_NEGATE_DEFAULT)),
            negation_mode=m.get("negation_mode", NEGATION_WEIGHTED),
        )


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters."""

    d: int
    t_scale: int  # schedule length used to normalize timesteps
    hidden: int = 128
    n_hidden_layers: int = 2
    time_dim: int = 32
    head_init: str = "zeros"  # "zeros" (flat start) or "normal" (random start)

    def __post_init__(self):
        if self.d < 1 or self.hidden < 1 or self.n_hidden_layers < 1:
            raise ValueError("d, hidden, n_hidden_layers must be positive")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even number >= 2")
        if self.head_init not in ("zeros", "normal"):
            raise ValueError(f"unknown head_init {self.head_init!r}")

    def to_manifest(self) -> dict:
        return {
            "d": self.d,
            "t_scale": self.t_scale,
            "hidden": self.hidden,
            "n_hidden_layers": self.n_hidden_layers,
            "time_dim": self.time_dim,
            "head_init": self.head_init,
        }

    @staticmethod
    def from_manifest(m: dict) -> "NetConfig":
        return NetConfig(**m)


class EnergyNetwork:
    """Parameters plus the concept spec and architecture they were built for."""

    def __init__(self, spec: ConceptSpec, config: NetConfig, params: ParameterSet):
        expected = parameter_shapes(spec, config)
        got = {name: t.value.shape for name, t in params.items()}
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match architecture {expected}")
        self.spec = spec
        self.config = config
        self.params = params

    def copy(self) -> "EnergyNetwork":
        return EnergyNetwork(self.spec, self.config, self.params.copy())


def parameter_shapes(spec: ConceptSpec, cfg: NetConfig) -> dict[str, tuple]:
    shapes = {
        "latent_w": (cfg.d, cfg.hidden),
        "latent_b": (cfg.hidden,),
        "time_w": (cfg.time_dim, cfg.hidden),
        "time_b": (cfg.hidden,),
        "token_emb": (spec.total_tokens, cfg.hidden),
    }
    for i in range(cfg.n_hidden_layers):
        shapes[f"trunk{i}_w"] = (cfg.hidden, cfg.hidden)
        shapes[f"trunk{i}_b"] = (cfg.hidden,)
    for k, n_k in enumerate(spec.cardinalities):
        shapes[f"head{k}_w"] = (cfg.hidden, n_k)
        shapes[f"head{k}_b"] = (n_k,)
    return shapes


def init_network(spec: ConceptSpec, cfg: NetConfig, seed: int) -> EnergyNetwork:
    """Fan-in scaled trunk, unit-scale token embeddings, zero (or small
    random) output heads."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(spec, cfg).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        elif name == "token_emb":
            arrays[name] = rng.normal(size=shape)
        elif name.startswith("head"):
            if cfg.head_init == "zeros":
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(size=shape) / np.sqrt(shape[0])
        else:
            arrays[name] = rng.normal(size=shape) / np.sqrt(shape[0])
    return EnergyNetwork(spec, cfg, ParameterSet(arrays))


def time_features(t, t_scale: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t / t_scale; rows for arrays, a vector for ints."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / float(t_scale)
    m = dim // 2
    freqs = np.exp(np.linspace(np.log(np.pi), np.log(2.0 * np.pi * max(t_scale, 2)), m))
    ang = tau[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return feats if np.ndim(t) else feats[0]


# ---------------------------------------------------------------------------
# Graph-building forward passes (batched; the public single-sample ops wrap
# these with batch size 1)
# ---------------------------------------------------------------------------


def _input_base(net: EnergyNetwork, V: Tensor, t_arr: np.ndarray) -> Tensor:
    """Latent + time projection, shared across all concept evaluations of the
    same (V, t) batch."""
    P = net.params
    tfeat = time_features(
        np.asarray(t_arr, dtype=np.float64), net.config.t_scale, net.config.time_dim
    )
    h = de.add(de.matmul(V, P["latent_w"]), P["latent_b"])
    return de.add(h, de.add(de.matmul(de.constant(tfeat), P["time_w"]), P["time_b"]))


def _concept_on_base(
    net: EnergyNetwork, base: Tensor, k: int, values: np.ndarray
) -> tuple[Tensor, Tensor]:
    P = net.params
    tokens = net.spec.token_offsets[k] + np.asarray(values, dtype=np.int64)
    h = de.add(base, de.gather_rows(P["token_emb"], tokens))
    for i in range(net.config.n_hidden_layers):
        h = de.silu(de.add(de.matmul(h, P[f"trunk{i}_w"]), P[f"trunk{i}_b"]))
    logits = de.add(de.matmul(h, P[f"head{k}_w"]), P[f"head{k}_b"])
    return logits, de.logsumexp(logits)


def concept_term_graph(
    net: EnergyNetwork,
    V: Tensor,
    t_arr: np.ndarray,
    k: int,
    values: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Logits (B, n_k) and per-sample energies (B,) of concept k conditioned
    on per-row value tokens."""
    return _concept_on_base(net, _input_base(net, V, t_arr), k, values)


def composed_energy_graph(
    net: EnergyNetwork, V: Tensor, t_arr: np.ndarray, labels: np.ndarray
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Per-sample composed energy (B,) plus per-concept (logits, energy)
    terms for reuse by classification losses."""
    labels = np.asarray(labels, dtype=np.int64)
    base = _input_base(net, V, t_arr)
    total = None
    terms = []
    for k in range(net.spec.K):
        logits, e_k = _concept_on_base(net, base, k, labels[:, k])
        terms.append((logits, e_k))
        total = e_k if total is None else de.add(total, e_k)
    return total, terms


def intervention_energy_graph(
    net: EnergyNetwork,
    V: Tensor,
    t_arr: np.ndarray,
    spec: InterventionSpec,
    targets_per_row: np.ndarray | None = None,
) -> tuple[Tensor, dict[int, Tensor]]:
    """Per-sample weighted intervention energy (B,).

    ``targets_per_row`` (B, K) overrides the spec's scalar targets row-wise;
    weights and states still come from the spec.
    """
    B = V.value.shape[0]
    terms = spec.terms(net.spec)
    base = _input_base(net, V, t_arr)
    total = None
    per_concept: dict[int, Tensor] = {}
    for k, value, w in terms:
        if targets_per_row is None:
            vals = np.full(B, value, dtype=np.int64)
        else:
            vals = np.asarray(targets_per_row[:, k], dtype=np.int64)
        _, e_k = _concept_on_base(net, base, k, vals)
        per_concept[k] = e_k
        # exact identity for w == 1.0 keeps all-active bitwise equal to composed
        term = e_k if w == 1.0 else de.mul(de.constant(w), e_k)
        total = term if total is None else de.add(total, term)
    return total, per_concept


# ---------------------------------------------------------------------------
# Public single-sample operations
# ---------------------------------------------------------------------------


def _check_inputs(net: EnergyNetwork, v: np.ndarray, t: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.config.d,):
        raise ValueError(f"latent must have shape ({net.config.d},), got {v.shape}")
    if not (0 <= int(t) <= net.config.t_scale):
        raise ValueError(f"timestep {t} outside [0, {net.config.t_scale}]")
    return v


def concept_logits(net: EnergyNetwork, v, t: int, k: int, value: int) -> np.ndarray:
    """Logits of head k conditioned on (v, t, token (k, value))."""
    v = _check_inputs(net, v, t)
    net.spec.check_value(k, value)
    V = de.constant(v[None, :])
    logits, _ = concept_term_graph(net, V, np.array([t]), k, np.array([value]))
    return logits.value[0].copy()


def per_concept_energy(net: EnergyNetwork, v, t: int, k: int, value: int) -> float:
    """LogSumExp of concept k's logits: a free-energy style scalar."""
    v = _check_inputs(net, v, t)
    net.spec.check_value(k, value)
    V = de.constant(v[None, :])
    _, e = concept_term_graph(net, V, np.array([t]), k, np.array([value]))
    return float(e.value[0])


def composed_energy(net: EnergyNetwork, v, t: int, C: ConceptAssignment) -> float:
    """Sum of per-concept energies at assignment C, in concept order."""
    v = _check_inputs(net, v, t)
    C.validate(net.spec)
    total = 0.0
    for k, value in enumerate(C.values):
        total += per_concept_energy(net, v, t, k, value)
    return total


def intervention_energy(net: EnergyNetwork, v, t: int, spec: InterventionSpec) -> float:
    """Weighted sum of per-concept energies over non-neutral concepts."""
    v = _check_inputs(net, v, t)
    total = 0.0
    for k, value, w in spec.terms(net.spec):
        e = per_concept_energy(net, v, t, k, value)
        total += e if w == 1.0 else w * e
    return total


def predict_concepts(net: EnergyNetwork, v, t: int) -> list[np.ndarray]:
    """Per-concept probability vectors via the diagonal readout: for each
    candidate value, condition on its own token and read that value's logit."""
    v = _check_inputs(net, v, t)
    out = []
    for k, n_k in enumerate(net.spec.cardinalities):
        V = de.constant(np.tile(v[None, :], (n_k, 1)))
        t_arr = np.full(n_k, t)
        logits, _ = concept_term_graph(net, V, t_arr, k, np.arange(n_k))
        diag = np.diag(logits.value)
        z = diag - np.max(diag)
        p = np.exp(z)
        p /= p.sum()
        out.append(p)
    return out


def model_score(net: EnergyNetwork, v, t: int, C: ConceptAssignment) -> np.ndarray:
    """The model's score: minus the input gradient of the composed energy."""
    v = _check_inputs(net, v, t)
    C.validate(net.spec)
    labels = np.asarray(C.values, dtype=np.int64)[None, :]

    V = Tensor(v[None, :], requires_grad=True)
    e_row, _ = composed_energy_graph(net, V, np.array([t]), labels)
    (g,) = de.grad(de.tsum(e_row), [V])
    return -g.value[0]


def model_score_batch(
    net: EnergyNetwork, V_np: np.ndarray, t_arr: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Row-wise model score for a batch of latents."""
    V = Tensor(np.asarray(V_np, dtype=np.float64), requires_grad=True)
    e_row, _ = composed_energy_graph(net, V, t_arr, labels)
    (g,) = de.grad(de.tsum(e_row), [V])
    return -g.value
