"""Masked codec token modeling with layered masking and triple guidance.

A desk-scale, numpy-only stack: token grids over residual codebook
layers, cosine masking schedules, per-frame conditioning (linguistics,
pitch, speaker prompt), a tiny rotary transformer with hand-written
backward, classifier-free guidance over three condition channels, an
iterative unmasking sampler, a reproducible trainer, and a synthetic
token world that makes all of it verifiable end to end.
"""

__version__ = "0.1.0"

from .conditioning import (
    ConditionBundle,
    DropFlags,
    LinguisticSequence,
    PitchContour,
    embed_pitch_contour,
    pitch_embedding,
    sample_condition_drop,
    upsample_linguistic,
)
from .evaluation import FpcReport, UndefinedMetricError, cfg_probe, fpc
from .grid import LayeredMask, MaskedGrid, TokenGrid, apply_mask, masked_positions
from .guidance import GuidanceWeights, LogitQuadruple, combine, required_passes
from .net import Model, ModelConfig
from .sampler import SamplerConfig, generate, sample_token, select_positions
from .schedules import (
    StepBudget,
    draw_training_mask,
    keep_probability,
    layer_distribution,
    unmask_counts,
)
from .synth import Sample, World, WorldSpec, generate_sample, make_dataset
from .trainer import TrainConfig, evaluate_masked_accuracy, masked_loss, train

__all__ = [
    "__version__",
    "TokenGrid", "LayeredMask", "MaskedGrid", "apply_mask", "masked_positions",
    "keep_probability", "layer_distribution", "draw_training_mask",
    "unmask_counts", "StepBudget",
    "PitchContour", "LinguisticSequence", "ConditionBundle", "DropFlags",
    "pitch_embedding", "embed_pitch_contour", "upsample_linguistic",
    "sample_condition_drop",
    "ModelConfig", "Model",
    "GuidanceWeights", "LogitQuadruple", "combine", "required_passes",
    "SamplerConfig", "generate", "sample_token", "select_positions",
    "TrainConfig", "masked_loss", "train", "evaluate_masked_accuracy",
    "fpc", "FpcReport", "UndefinedMetricError", "cfg_probe",
    "WorldSpec", "World", "Sample", "generate_sample", "make_dataset",
]
