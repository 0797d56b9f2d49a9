"""Reconstruction, sharpness, gradient-matching, diversity and BN-statistics losses."""

from .generation import (
    GradMatchLoss,
    LossTerms,
    NeighborPerturbation,
    bn_loss,
    bn_loss_from_stats,
    diversity_loss,
    final_loss,
    grad_match_loss,
    literal_perturbation_gradient,
    neighbor_perturbation,
    stored_stats,
)
from .gradients import (
    FCHessianBlocks,
    GradVector,
    aggregate_cosine,
    autodiff_fc_gradient,
    batched_fc_gradients,
    cosine_distance,
    fc_gradients,
    fc_hessian_reference,
    per_sample_fc_gradient,
    pool_gradient_cosine,
)
from .reconstruction import (
    SharpnessProbe,
    ascent_perturbation,
    reconstruction_from_activations,
    reconstruction_loss,
    sam_epsilon,
    sam_loss,
    sharpness_probe,
)

__all__ = [
    "FCHessianBlocks",
    "GradMatchLoss",
    "GradVector",
    "LossTerms",
    "NeighborPerturbation",
    "SharpnessProbe",
    "aggregate_cosine",
    "ascent_perturbation",
    "autodiff_fc_gradient",
    "batched_fc_gradients",
    "bn_loss",
    "bn_loss_from_stats",
    "cosine_distance",
    "diversity_loss",
    "fc_gradients",
    "fc_hessian_reference",
    "final_loss",
    "grad_match_loss",
    "literal_perturbation_gradient",
    "neighbor_perturbation",
    "per_sample_fc_gradient",
    "pool_gradient_cosine",
    "reconstruction_from_activations",
    "reconstruction_loss",
    "sam_epsilon",
    "sam_loss",
    "sharpness_probe",
    "stored_stats",
]
