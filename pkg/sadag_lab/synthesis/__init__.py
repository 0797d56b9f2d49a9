"""Synthetic calibration-set generation."""

from .pipeline import (
    GenerationConfig,
    Provenance,
    SynthDataset,
    emit_dataset,
    generate,
    generate_bn_only,
    load_synth_dataset,
    render,
    synthesize,
    warmup,
)

__all__ = [
    "GenerationConfig",
    "Provenance",
    "SynthDataset",
    "emit_dataset",
    "generate",
    "generate_bn_only",
    "load_synth_dataset",
    "render",
    "synthesize",
    "warmup",
]
