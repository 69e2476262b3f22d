"""Latent-space surrogate-reward fine-tuning of two-step samplers on 2-D toy data."""

from ._lasro import (
    CheckpointError,
    InvalidStateError,
    NoDensityError,
    Pipeline,
    PreconditionError,
    RunningStats,
    ValidationError,
    alpha_bar,
    fidelity_proxy,
    pair_loss_from_gap,
    parse_config,
    sample_dataset,
    spearman,
    wasserstein1_1d,
)

__all__ = [
    "CheckpointError",
    "InvalidStateError",
    "NoDensityError",
    "Pipeline",
    "PreconditionError",
    "RunningStats",
    "ValidationError",
    "alpha_bar",
    "fidelity_proxy",
    "pair_loss_from_gap",
    "parse_config",
    "sample_dataset",
    "spearman",
    "wasserstein1_1d",
]
