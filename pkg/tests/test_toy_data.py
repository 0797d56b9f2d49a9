"""Procedural toy dataset: determinism, balance and persistence."""

import numpy as np
import pytest

from sadag_lab.harness.toy_data import (
    TRAIN_FILE,
    VAL_FILE,
    load_labeled,
    make_toy_dataset,
    write_toy_dataset,
)

pytestmark = pytest.mark.unit


def test_splits_are_deterministic_and_balanced(toy_splits):
    train, val = toy_splits
    again, _ = make_toy_dataset(num_classes=4, image_size=8, train_size=64, val_size=32, seed=3)
    np.testing.assert_array_equal(train.images, again.images)
    np.testing.assert_array_equal(train.labels, again.labels)
    assert np.bincount(train.labels).tolist() == [16] * 4
    assert np.bincount(val.labels).tolist() == [8] * 4
    assert train.images.shape == (64, 3, 8, 8)
    assert train.images.min() >= -1.0 and train.images.max() <= 1.0


def test_sample_keys_are_disjoint(toy_splits):
    train, val = toy_splits
    assert train.metadata["key_range"] == [0, 64]
    assert val.metadata["key_range"] == [64, 96]


def test_seed_changes_the_images(toy_splits):
    train, _ = toy_splits
    other, _ = make_toy_dataset(num_classes=4, image_size=8, train_size=64, val_size=32, seed=4)
    assert not np.array_equal(train.images, other.images)


@pytest.mark.parametrize(
    "params",
    [
        {"num_classes": 1},
        {"image_size": 2},
        {"train_size": 2, "num_classes": 4},
        {"noise": -0.1},
    ],
)
def test_invalid_parameters(params):
    with pytest.raises(ValueError):
        make_toy_dataset(**params)


def test_write_and_load(tmp_path):
    train_path, val_path = write_toy_dataset(
        tmp_path, {"stage_hash": "abc"}, num_classes=3, image_size=4, train_size=9, val_size=6
    )
    assert (train_path.name, val_path.name) == (TRAIN_FILE, VAL_FILE)
    val = load_labeled(val_path)
    assert len(val) == 6
    assert val.num_classes == 3
    assert val.metadata["stage_hash"] == "abc"
    assert val.metadata["split"] == "val"
