"""Uncertainty-aware (introspective) similarity metric and metric-learning toolkit."""

from .metric import (
    DiagGaussian,
    MetricParams,
    PairedEmbedding,
    gaussian_kl,
    grad_decay_factor,
    grad_introspective_distance,
    introspective_cosine,
    introspective_cosine_dis,
    introspective_distance,
    relative_uncertainty,
    semantic_distance,
    similarity_uncertainty,
    strict_introspective_distance,
)
from .mixer import LabelSet, MixConfig, label_equal, mix_batch, mix_pair

__version__ = "0.1.0"
