"""Full-precision teacher: conv+BN+ReLU blocks, global average pooling and a linear head."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..autodiff import Tensor, no_grad, ops
from ..errors import DegenerateBatchError, ShapeError

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ForwardResult:
    """Per-layer outputs of one forward pass.

    ``activations`` holds the block outputs followed by the logits, so its length is the layer
    count L and it lines up index by index between the teacher and the quantized copy.
    ``batch_stats`` holds, per BN layer, the batch mean and standard deviation of the
    pre-normalization features.
    """

    activations: list[Tensor]
    features: Tensor
    logits: Tensor
    batch_stats: list[tuple[Tensor, Tensor]] = field(default_factory=list)


@dataclass
class ConvBlock:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_std: np.ndarray
    stride: int = 2
    padding: int = 1

    @property
    def channels(self) -> int:
        return int(self.weight.shape[0])


def he_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape))


class TeacherNet:
    """Conv blocks (stride 2, 3x3, no bias) with batch norm, then GAP and FC of shape d x C."""

    def __init__(
        self,
        blocks: list[ConvBlock],
        fc_weight: Tensor,
        fc_bias: Tensor,
        input_shape: tuple[int, int, int],
        num_classes: int,
    ):
        if fc_weight.shape != (blocks[-1].channels, num_classes):
            raise ShapeError(
                f"fc weight {fc_weight.shape} does not match ({blocks[-1].channels}, {num_classes})"
            )
        self.blocks = blocks
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    @classmethod
    def initialize(
        cls,
        seed: int,
        input_shape: tuple[int, int, int] = (3, 16, 16),
        channels: Sequence[int] = (8, 16, 32),
        num_classes: int = 4,
    ) -> "TeacherNet":
        rng = np.random.default_rng(seed)
        blocks = []
        in_ch = input_shape[0]
        for out_ch in channels:
            weight = he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9)
            blocks.append(
                ConvBlock(
                    weight=Tensor(weight, requires_grad=True),
                    gamma=Tensor(np.ones(out_ch), requires_grad=True),
                    beta=Tensor(np.zeros(out_ch), requires_grad=True),
                    running_mean=np.zeros(out_ch),
                    running_std=np.ones(out_ch),
                )
            )
            in_ch = out_ch
        fc_weight = rng.normal(0.0, np.sqrt(1.0 / in_ch), size=(in_ch, num_classes))
        return cls(
            blocks,
            Tensor(fc_weight, requires_grad=True),
            Tensor(np.zeros(num_classes), requires_grad=True),
            input_shape,
            num_classes,
        )

    @property
    def num_layers(self) -> int:
        return len(self.blocks) + 1

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].channels

    # -- parameters ----------------------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            params[f"conv{i}.weight"] = block.weight
            params[f"bn{i}.gamma"] = block.gamma
            params[f"bn{i}.beta"] = block.beta
        params["fc.weight"] = self.fc_weight
        params["fc.bias"] = self.fc_bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        buffers: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks):
            buffers[f"bn{i}.running_mean"] = block.running_mean
            buffers[f"bn{i}.running_std"] = block.running_std
        return buffers

    def set_trainable(self, flag: bool) -> "TeacherNet":
        for tensor in self.parameters().values():
            tensor.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.parameters().items()}
        state.update({name: arr.copy() for name, arr in self.buffers().items()})
        return state

    @classmethod
    def from_state_dict(
        cls, state: dict[str, np.ndarray], input_shape: tuple[int, int, int], num_classes: int
    ) -> "TeacherNet":
        """Rebuild a frozen teacher from named arrays."""
        count = sum(1 for name in state if name.startswith("conv") and name.endswith(".weight"))
        if count == 0:
            raise ShapeError("state holds no conv weights")
        try:
            blocks = [
                ConvBlock(
                    weight=Tensor(state[f"conv{i}.weight"]),
                    gamma=Tensor(state[f"bn{i}.gamma"]),
                    beta=Tensor(state[f"bn{i}.beta"]),
                    running_mean=np.asarray(state[f"bn{i}.running_mean"], dtype=np.float64),
                    running_std=np.asarray(state[f"bn{i}.running_std"], dtype=np.float64),
                )
                for i in range(count)
            ]
            fc_weight, fc_bias = Tensor(state["fc.weight"]), Tensor(state["fc.bias"])
            net = cls(blocks, fc_weight, fc_bias, input_shape, num_classes)
        except KeyError as exc:
            raise ShapeError(f"state is missing tensor {exc.args[0]}") from None
        for i, block in enumerate(blocks):
            if not np.all(block.running_std > 0):
                raise ShapeError(f"bn{i} stored std must be positive")
        return net

    def clone(self) -> "TeacherNet":
        net = TeacherNet.from_state_dict(self.state_dict(), self.input_shape, self.num_classes)
        for name, tensor in net.parameters().items():
            tensor.requires_grad = self.parameters()[name].requires_grad
        return net

    # -- forward -------------------------------------------------------------------------------

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected a batch of {self.input_shape} images, got {x.shape}")
        if x.shape[0] == 0:
            raise ShapeError("empty batch")

    def forward(self, x: Tensor, mode: str = "eval") -> ForwardResult:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.check_input(x)
        h = x
        activations: list[Tensor] = []
        batch_stats: list[tuple[Tensor, Tensor]] = []
        for j, block in enumerate(self.blocks):
            z = ops.conv2d(h, block.weight, stride=block.stride, padding=block.padding)
            mu, std = ops.channel_stats(z, BN_EPS)
            batch_stats.append((mu, std))
            if mode == "train":
                if np.any(z.data.var(axis=(0, 2, 3)) == 0):
                    raise DegenerateBatchError(f"bn{j}: zero variance in a training batch")
                normalized = ops.batchnorm_apply(z, mu, std, block.gamma, block.beta)
                block.running_mean = (1 - BN_MOMENTUM) * block.running_mean + BN_MOMENTUM * mu.data
                block.running_std = (1 - BN_MOMENTUM) * block.running_std + BN_MOMENTUM * std.data
            else:
                stored = Tensor(block.running_mean), Tensor(block.running_std)
                normalized = ops.batchnorm_apply(z, *stored, block.gamma, block.beta)
            h = ops.relu(normalized)
            activations.append(h)
        features = ops.global_avg_pool(h)
        logits = ops.add(ops.matmul(features, self.fc_weight), self.fc_bias)
        activations.append(logits)
        return ForwardResult(activations, features, logits, batch_stats)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax labels in eval mode."""
        preds = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = self.forward(Tensor(images[start : start + batch_size])).logits
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def teacher_forward(net: TeacherNet, x: Tensor, mode: str = "eval") -> ForwardResult:
    return net.forward(x, mode)


def accuracy(net: TeacherNet, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(net.predict(images) == np.asarray(labels)))
