"""Choosing calibration subsets of real data whose gradients match the pool's."""

import itertools
import logging
from dataclasses import dataclass
from math import comb
from typing import Union

import numpy as np
from tqdm import tqdm

from ..datasets import LabeledDataset
from ..errors import ZeroGradientError
from ..losses.gradients import aggregate_cosine, batched_fc_gradients
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet
from ..seeding import rng_stream

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_POOL = 12

Pool = Union[LabeledDataset, np.ndarray]


@dataclass
class Selection:
    """Chosen pool indices, in selection order, and their aggregate gradient cosine."""

    indices: np.ndarray
    objective: float

    def __len__(self) -> int:
        return int(self.indices.size)

    def subset(self, pool: LabeledDataset) -> LabeledDataset:
        return pool.subset(self.indices)


def _pool_images(pool: Pool) -> np.ndarray:
    return pool.images if isinstance(pool, LabeledDataset) else np.asarray(pool, dtype=np.float64)


def _check_k(k: int, size: int) -> None:
    if k <= 0:
        raise ValueError(f"subset size must be positive, got {k}")
    if k > size:
        raise ValueError(f"subset size {k} exceeds the pool ({size})")


def greedy_gradient_subset(grads: np.ndarray, k: int, progress: bool = False) -> Selection:
    """Forward selection maximizing cos(sum of chosen rows, sum of all rows).

    Each step adds the row with the highest resulting cosine; ties go to the lowest index.
    """
    grads = np.asarray(grads, dtype=np.float64)
    _check_k(k, grads.shape[0])
    target = grads.sum(axis=0)
    target_norm = np.linalg.norm(target)
    if target_norm == 0:
        raise ZeroGradientError("pool gradient sums to zero; the matching objective is undefined")
    running = np.zeros_like(target)
    chosen = np.zeros(grads.shape[0], dtype=bool)
    order = []
    for _ in tqdm(range(k), desc="Selecting", disable=not progress):
        candidates = running + grads
        norms = np.linalg.norm(candidates, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(norms > 0, candidates @ target / (norms * target_norm), -np.inf)
        scores[chosen] = -np.inf
        best = int(np.argmax(scores))
        chosen[best] = True
        order.append(best)
        running = running + grads[best]
    indices = np.asarray(order, dtype=np.int64)
    return Selection(indices, aggregate_cosine(grads[indices], grads))


def exhaustive_gradient_subset(grads: np.ndarray, k: int) -> Selection:
    """Best k-subset by brute force; first in lexicographic order among equals."""
    grads = np.asarray(grads, dtype=np.float64)
    _check_k(k, grads.shape[0])
    if grads.shape[0] > EXHAUSTIVE_MAX_POOL:
        raise ValueError(
            f"exhaustive search is limited to pools of {EXHAUSTIVE_MAX_POOL}, got {grads.shape[0]}"
        )
    best, best_value = None, -np.inf
    for combo in itertools.combinations(range(grads.shape[0]), k):
        try:
            value = aggregate_cosine(grads[list(combo)], grads)
        except ZeroGradientError:
            continue
        if value > best_value:
            best, best_value = combo, value
    if best is None:
        raise ZeroGradientError("every subset has a zero aggregate gradient")
    logger.debug(f"Exhaustive search over {comb(grads.shape[0], k)} subsets: best {best_value:.6f}")
    return Selection(np.asarray(best, dtype=np.int64), float(best_value))


def select_subset(
    pool: Pool, k: int, q: QuantNet, t: TeacherNet, progress: bool = False
) -> Selection:
    """
    Greedy gradient-matching selection of ``k`` pool samples for the current ``q``.

    Args:
        pool: Images, or a labeled dataset whose images are used
        k: Subset size, at most the pool size
        q: Quantized net the per-sample gradients are taken for
        t: Full-precision reference
        progress: Show a progress bar over the greedy steps

    Returns:
        Chosen pool indices in pick order and their gradient cosine with the pool

    Raises:
        ValueError: ``k`` is not in ``[1, len(pool)]``
        ZeroGradientError: The pool gradient sums to zero
    """
    images = _pool_images(pool)
    _check_k(k, images.shape[0])
    grads = batched_fc_gradients(q, t, images)
    selection = greedy_gradient_subset(grads, k, progress)
    logger.info(
        f"Selected {k} of {images.shape[0]} samples: gradient cosine {selection.objective:.4f}"
    )
    return selection


def exhaustive_best_subset(pool: Pool, k: int, q: QuantNet, t: TeacherNet) -> Selection:
    images = _pool_images(pool)
    return exhaustive_gradient_subset(batched_fc_gradients(q, t, images), k)


def random_subset(size: int, k: int, seed: int) -> np.ndarray:
    """Sorted uniform sample of ``k`` distinct indices from ``range(size)``."""
    _check_k(k, size)
    rng = rng_stream(seed, "random-subset")
    return np.sort(rng.choice(size, size=k, replace=False)).astype(np.int64)
