"""Supervised training of the full-precision teacher."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from tqdm import tqdm

from ..autodiff import Tensor, grad, ops
from ..datasets import LabeledDataset
from ..errors import NonFiniteError
from .optim import SGD, CosineSchedule
from .teacher import TeacherNet, accuracy

logger = logging.getLogger(__name__)


@dataclass
class TrainResult:
    net: TeacherNet
    accuracy: float
    reached_floor: bool
    epochs: int


def train_teacher(
    dataset: LabeledDataset,
    epochs: int,
    seed: int,
    val: Optional[LabeledDataset] = None,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 64,
    floor: float = 0.90,
    channels: tuple = (8, 16, 32),
    progress: bool = False,
) -> TrainResult:
    """Train with momentum SGD and cosine decay; report accuracy on ``val`` (or the train set).

    Falling short of ``floor`` is logged and reported in the result, not raised.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if dataset.num_classes < 2 or len(np.unique(dataset.labels)) < 2:
        raise ValueError("training needs at least two classes")
    net = TeacherNet.initialize(seed, dataset.input_shape, channels, dataset.num_classes)
    params = list(net.parameters().values())
    optimizer = SGD(params, lr=lr, momentum=momentum)
    steps_per_epoch = -(-len(dataset) // batch_size)
    schedule = CosineSchedule(optimizer, total_steps=epochs * steps_per_epoch)
    rng = np.random.default_rng(seed + 1)

    for epoch in tqdm(range(epochs), desc="Training teacher", disable=not progress):
        running = 0.0
        for images, labels in dataset.batches(batch_size, rng):
            if len(labels) < 2:
                continue
            out = net.forward(Tensor(images), mode="train")
            loss = ops.softmax_crossentropy(out.logits, labels)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"teacher loss became non-finite in epoch {epoch}")
            optimizer.step(grad(loss, params))
            schedule.step()
            running += loss.item() * len(labels)
        logger.debug(f"Epoch {epoch + 1}/{epochs}: train loss {running / len(dataset):.4f}")

    net.set_trainable(False)
    held_out = val if val is not None else dataset
    acc = accuracy(net, held_out.images, held_out.labels)
    reached = acc >= floor
    if reached:
        logger.info(f"Teacher trained: held-out accuracy {acc:.4f}")
    else:
        logger.warning(f"Teacher accuracy {acc:.4f} is below the floor {floor:.2f}")
    return TrainResult(net=net, accuracy=acc, reached_floor=reached, epochs=epochs)
