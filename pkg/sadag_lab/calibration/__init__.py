"""Calibration, evaluation and gradient-matching subset selection."""

from .calibrator import CalibConfig, calibrate
from .decomposition import TotalLossDecomposition, decompose_total_loss
from .evaluation import EvalReport, evaluate, measure_sharpness_curve
from .selection import (
    Selection,
    exhaustive_best_subset,
    exhaustive_gradient_subset,
    greedy_gradient_subset,
    random_subset,
    select_subset,
)

__all__ = [
    "CalibConfig",
    "EvalReport",
    "Selection",
    "TotalLossDecomposition",
    "calibrate",
    "decompose_total_loss",
    "evaluate",
    "exhaustive_best_subset",
    "exhaustive_gradient_subset",
    "greedy_gradient_subset",
    "measure_sharpness_curve",
    "random_subset",
    "select_subset",
]
