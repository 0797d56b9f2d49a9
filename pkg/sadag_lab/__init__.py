"""SADAG lab - sharpness-aware data generation for zero-shot quantization, on numpy."""

__version__ = "0.1.0"
