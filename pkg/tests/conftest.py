"""Shared fixtures: tiny nets and datasets small enough for finite-difference checks."""

import numpy as np
import pytest

from sadag_lab.autodiff import Tensor
from sadag_lab.harness.config import ExperimentConfig
from sadag_lab.harness.toy_data import make_toy_dataset
from sadag_lab.nets import GeneratorNet, TeacherNet
from sadag_lab.quant import default_bit_map, init_quantnet

IMAGE_SHAPE = (3, 8, 8)
TEACHER_CHANNELS = (4, 6, 8)
GENERATOR_CHANNELS = (8, 6, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def teacher():
    """Randomly initialized teacher with stored BN statistics nudged away from (0, 1)."""
    net = TeacherNet.initialize(7, IMAGE_SHAPE, TEACHER_CHANNELS, num_classes=4)
    stats_rng = np.random.default_rng(99)
    for block in net.blocks:
        block.running_mean = stats_rng.normal(0.0, 0.1, block.channels)
        block.running_std = stats_rng.uniform(0.8, 1.2, block.channels)
    return net.set_trainable(False)


@pytest.fixture
def images(rng):
    return rng.uniform(-1.0, 1.0, size=(6,) + IMAGE_SHAPE)


@pytest.fixture
def quantnet(teacher):
    bits_w, bits_a = default_bit_map(4, 32)
    return init_quantnet(teacher, bits_w, bits_a)


@pytest.fixture
def quantnet_acts(teacher, images):
    """4-bit weights and activations, activation ranges already observed."""
    q = init_quantnet(teacher, *default_bit_map(4, 4))
    q.observe_activation_ranges(Tensor(images))
    return q


@pytest.fixture
def generator():
    return GeneratorNet.initialize(11, IMAGE_SHAPE, GENERATOR_CHANNELS)


@pytest.fixture
def toy_splits():
    return make_toy_dataset(num_classes=4, image_size=8, train_size=64, val_size=32, seed=3)


@pytest.fixture
def small_config(tmp_path):
    return ExperimentConfig(
        seed=0,
        bits_w=4,
        bits_a=4,
        num_images=8,
        warmup_iters=2,
        gen_epochs=1,
        batch_gen=4,
        calib_iters=3,
        batch_cal=4,
        eval_samples=8,
        sharpness_radii=[0.01, 0.02],
        pool_size=16,
        subset_sizes=[4],
        image_size=8,
        train_size=64,
        val_size=32,
        teacher_epochs=1,
        teacher_batch=16,
        teacher_floor=0.0,
        out_dir=str(tmp_path / "runs"),
        progress=False,
    )
