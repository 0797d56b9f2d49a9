"""Procedural labeled images standing in for a real classification dataset.

Each class has its own tint, stripe frequency and stripe orientation. A sample is a Gaussian
blob of the class tint at a random position, overlaid with the class stripes at a random
phase, plus pixel noise, clipped to [-1, 1]. Each split draws from its own named stream. Sample
keys number the training images first and the validation images after them.
"""

import colorsys
import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from ..datasets import LabeledDataset
from ..seeding import rng_stream
from .formats import read_dataset, write_dataset

logger = logging.getLogger(__name__)

TRAIN_FILE = "train.sadd"
VAL_FILE = "val.sadd"


def _class_palette(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes) / num_classes
    return np.array([colorsys.hsv_to_rgb(h, 0.8, 1.0) for h in hues]) * 2.0 - 1.0


def _render(
    labels: np.ndarray, rng: np.random.Generator, num_classes: int, size: int, noise: float
) -> np.ndarray:
    n = labels.size
    palette = _class_palette(num_classes)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    centers = rng.uniform(0.25, 0.75, size=(n, 2))
    widths = rng.uniform(0.15, 0.3, size=n)
    phases = rng.uniform(0.0, 2 * np.pi, size=n)
    pixel_noise = rng.normal(0.0, noise, size=(n, 3, size, size))

    cy, cx = centers[:, 0, None, None], centers[:, 1, None, None]
    dist2 = (yy[None] - cy) ** 2 + (xx[None] - cx) ** 2
    blob = np.exp(-dist2 / (2 * widths[:, None, None] ** 2))
    freq = 1.0 + labels
    angle = np.pi * labels / num_classes
    proj = xx[None] * np.cos(angle)[:, None, None] + yy[None] * np.sin(angle)[:, None, None]
    stripes = 0.35 * np.sin(2 * np.pi * freq[:, None, None] * proj + phases[:, None, None])

    tint = palette[labels][:, :, None, None]
    images = 0.8 * blob[:, None] * tint + stripes[:, None] - 0.2 + pixel_noise
    return np.clip(images, -1.0, 1.0)


def make_toy_dataset(
    num_classes: int = 4,
    image_size: int = 16,
    train_size: int = 2048,
    val_size: int = 1024,
    seed: int = 0,
    noise: float = 0.1,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic, class-balanced train and validation splits with disjoint sample keys."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if image_size < 4:
        raise ValueError(f"image size must be at least 4, got {image_size}")
    if train_size < num_classes or val_size < num_classes:
        raise ValueError("each split needs at least one image per class")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")

    splits = []
    for name, lo, count in (("train", 0, train_size), ("val", train_size, val_size)):
        rng = rng_stream(seed, f"toy-{name}")
        labels = rng.permutation(np.arange(count) % num_classes)
        images = _render(labels, rng, num_classes, image_size, noise)
        metadata = {
            "kind": "toy",
            "split": name,
            "seed": int(seed),
            "num_classes": int(num_classes),
            "key_range": [lo, lo + count],
        }
        splits.append(LabeledDataset(images, labels, num_classes, metadata))
    train, val = splits
    logger.info(f"Toy dataset: {len(train)} train / {len(val)} val images, {num_classes} classes")
    return train, val


def write_toy_dataset(
    out_dir: Union[str, Path], metadata: Optional[Mapping[str, Any]] = None, **params
) -> tuple[Path, Path]:
    """Generate both splits and write them as ``train.sadd`` and ``val.sadd`` under ``out_dir``."""
    train, val = make_toy_dataset(**params)
    out_dir = Path(out_dir)
    paths = []
    for ds, filename in ((train, TRAIN_FILE), (val, VAL_FILE)):
        meta = dict(ds.metadata, **dict(metadata or {}))
        paths.append(write_dataset(out_dir / filename, ds.images, ds.labels, meta))
    return paths[0], paths[1]


def load_labeled(path: Union[str, Path]) -> LabeledDataset:
    """Read a dataset file; the class count comes from its metadata or the labels."""
    images, labels, meta = read_dataset(path)
    num_classes = int(meta.get("num_classes", int(labels.max()) + 1 if labels.size else 1))
    return LabeledDataset(images, labels, num_classes, meta)
