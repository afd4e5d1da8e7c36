"""Soft mixtures of LoRA experts for continual masked-prediction training.

A frozen transformer encoder is extended with low-rank experts on its
feed-forward projections; a softmax router mixes them per frame. The package
carries its own small autodiff core, a synthetic multi-language corpus,
k-means target generation, a two-stage trainer and analysis tools.
"""

from .analysis import count_parameters, emit_report, expert_activation_profile
from .corpus import LanguageSpec, Manifest, Utterance, generate_language, make_language
from .encoder import Encoder, EncoderConfig, MaskConfig, MiLoreConfig, apply_span_mask
from .mixture import ConfigError, MiLoreLinear, milore_forward, route
from .objective import EmptyMaskError, PredictionHead, masked_prediction_loss
from .targets import Codebook, KMeansConfig, minibatch_kmeans_fit
from .tensor import GraphError, ShapeError, Tensor, no_grad
from .trainer import (
    ScheduleConfig,
    TrainConfig,
    continual_train,
    load_checkpoint,
    lr_at,
    pretrain_base,
    probe_evaluate,
    reference_labels,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "ConfigError",
    "EmptyMaskError",
    "Encoder",
    "EncoderConfig",
    "GraphError",
    "KMeansConfig",
    "LanguageSpec",
    "Manifest",
    "MaskConfig",
    "MiLoreConfig",
    "MiLoreLinear",
    "PredictionHead",
    "ScheduleConfig",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Utterance",
    "apply_span_mask",
    "continual_train",
    "count_parameters",
    "emit_report",
    "expert_activation_profile",
    "generate_language",
    "load_checkpoint",
    "lr_at",
    "make_language",
    "masked_prediction_loss",
    "milore_forward",
    "minibatch_kmeans_fit",
    "no_grad",
    "pretrain_base",
    "probe_evaluate",
    "reference_labels",
    "route",
    "save_checkpoint",
]
