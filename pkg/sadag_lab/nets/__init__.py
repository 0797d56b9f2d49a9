"""Teacher network, its trainer, the image generator and optimizers."""

from .generator import EMBED_DIM, GeneratorNet, LatentBatch, generator_forward
from .optim import SGD, Adam, CosineSchedule, ExponentialLR, ReduceLROnPlateau
from .teacher import ConvBlock, ForwardResult, TeacherNet, accuracy, teacher_forward
from .trainer import TrainResult, train_teacher

__all__ = [
    "EMBED_DIM",
    "SGD",
    "Adam",
    "ConvBlock",
    "CosineSchedule",
    "ExponentialLR",
    "ForwardResult",
    "GeneratorNet",
    "LatentBatch",
    "ReduceLROnPlateau",
    "TeacherNet",
    "TrainResult",
    "accuracy",
    "generator_forward",
    "teacher_forward",
    "train_teacher",
]
