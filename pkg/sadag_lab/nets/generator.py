"""Generator mapping 256-d embeddings to teacher-shaped images, and the latent embedding set."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import Tensor, ops
from ..errors import ShapeError
from .teacher import BN_EPS, he_normal

logger = logging.getLogger(__name__)

EMBED_DIM = 256


class GeneratorNet:
    """dense -> (C0, 4, 4) -> [upsample x2, conv3x3, batch-stat BN, ReLU] x 2 -> conv3x3 -> tanh.

    The BN layers always normalize with the statistics of the current batch.
    """

    def __init__(self, params: dict[str, Tensor], output_shape: tuple[int, int, int]):
        self.params = params
        self.output_shape = tuple(output_shape)
        self.base_channels = int(params["dense.weight"].shape[1] // (self.base_size**2))

    @property
    def base_size(self) -> int:
        return self.output_shape[1] // 4

    @classmethod
    def initialize(
        cls,
        seed: int,
        output_shape: tuple[int, int, int] = (3, 16, 16),
        channels: Sequence[int] = (32, 16, 8),
    ) -> "GeneratorNet":
        out_ch, height, width = output_shape
        if height != width or height % 4:
            raise ShapeError(
                f"generator needs square images with side divisible by 4, got {output_shape}"
            )
        rng = np.random.default_rng(seed)
        base = height // 4
        c0, c1, c2 = channels
        params = {
            "dense.weight": he_normal(rng, (EMBED_DIM, c0 * base * base), EMBED_DIM),
            "dense.bias": np.zeros(c0 * base * base),
            "conv0.weight": he_normal(rng, (c1, c0, 3, 3), c0 * 9),
            "bn0.gamma": np.ones(c1),
            "bn0.beta": np.zeros(c1),
            "conv1.weight": he_normal(rng, (c2, c1, 3, 3), c1 * 9),
            "bn1.gamma": np.ones(c2),
            "bn1.beta": np.zeros(c2),
            "out.weight": rng.normal(0.0, np.sqrt(1.0 / (c2 * 9)), size=(out_ch, c2, 3, 3)),
            "out.bias": np.zeros(out_ch),
        }
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        return cls(leaves, output_shape)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != EMBED_DIM:
            raise ShapeError(f"embeddings must be (B, {EMBED_DIM}), got {z.shape}")
        p = self.params
        b = self.base_size
        h = ops.add(ops.matmul(z, p["dense.weight"]), p["dense.bias"])
        h = ops.reshape(h, (z.shape[0], self.base_channels, b, b))
        for i in range(2):
            h = ops.upsample_nearest(h, 2)
            h = ops.conv2d(h, p[f"conv{i}.weight"], padding=1)
            mu, std = ops.channel_stats(h, BN_EPS)
            h = ops.relu(ops.batchnorm_apply(h, mu, std, p[f"bn{i}.gamma"], p[f"bn{i}.beta"]))
        return ops.tanh(ops.conv2d(h, p["out.weight"], p["out.bias"], padding=1))

    __call__ = forward


def generator_forward(g: GeneratorNet, z: Tensor) -> Tensor:
    return g.forward(z)


@dataclass
class LatentBatch:
    """The T embeddings behind the synthetic set, stored as per-minibatch leaf tensors."""

    chunks: list[Tensor]

    @classmethod
    def sample(cls, num_images: int, batch_size: int, seed: int) -> "LatentBatch":
        if num_images <= 0 or batch_size <= 0:
            raise ValueError(
                f"need positive sizes, got num_images={num_images}, batch={batch_size}"
            )
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((num_images, EMBED_DIM))
        bounds = list(range(0, num_images, batch_size)) + [num_images]
        if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
            # a trailing single embedding joins the previous minibatch (BN needs two samples)
            del bounds[-2]
        chunks = [
            Tensor(z[lo:hi], requires_grad=True, name=f"z{i}")
            for i, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:]))
        ]
        return cls(chunks)

    @property
    def num_images(self) -> int:
        return sum(c.shape[0] for c in self.chunks)

    @property
    def Z(self) -> np.ndarray:
        return np.concatenate([c.data for c in self.chunks], axis=0)

    def __len__(self) -> int:
        return len(self.chunks)
