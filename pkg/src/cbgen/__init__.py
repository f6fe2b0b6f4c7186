"""Concept-bottleneck energy-based generative modeling on a synthetic
latent world."""

from .diffengine import (
    ParameterSet,
    Tensor,
    checked,
    grad,
    grad_input,
    grad_params,
    grad_params_of_input_grad,
    set_checked,
)
from .diffusion import NoiseSchedule, forward_noise, make_schedule, target_score
from .energymodel import (
    ConceptAssignment,
    ConceptSpec,
    EnergyNetwork,
    InterventionSpec,
    NetConfig,
    composed_energy,
    concept_logits,
    init_network,
    intervention_energy,
    model_score,
    per_concept_energy,
    predict_concepts,
)
from .synthworld import (
    Glyph,
    WorldConfig,
    make_dataset,
    make_world,
    oracle_label,
    render_glyph,
    sample_prior,
)
from .checkpoint import Checkpoint, checkpoint_hash, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, total_loss, train, train_step
from .sampler import (
    SamplerConfig,
    Trajectory,
    activate,
    compose,
    init_latent,
    intervention_step,
    negate,
    neutral,
    run_sampler,
)
from .evalsuite import EvalConfig, EvalReport, concept_accuracy, mmd, run_eval

__version__ = "0.1.0"
