"""Fake-quantized mirror of the teacher network."""

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from ..autodiff import Tensor, no_grad, ops
from ..errors import ShapeError
from ..nets.teacher import ForwardResult, TeacherNet
from .quantizers import (
    FULL_PRECISION_BITS,
    ActivationQuantizer,
    WeightQuantizer,
    quantize_adaround,
    quantize_nearest,
    round_regularizer,
)

logger = logging.getLogger(__name__)

# weight quantizers follow conv0..conv{n-1}, fc; activation quantizers sit on the outputs of all
# blocks but the last and on the pooled FC input
FC_INPUT = "fc_in"


def weight_layer_names(num_blocks: int) -> list[str]:
    return [f"conv{i}" for i in range(num_blocks)] + ["fc"]


def act_point_names(num_blocks: int) -> list[str]:
    return [f"act{i}" for i in range(num_blocks - 1)] + [FC_INPUT]


def default_bit_map(
    weight_bits: int, act_bits: int, num_blocks: int = 3
) -> tuple[dict[str, int], dict[str, int]]:
    """First conv and FC weights at 8 bits, FC input at 8 bits, everything else nominal."""
    bits_w = {name: weight_bits for name in weight_layer_names(num_blocks)}
    bits_w["conv0"] = max(8, weight_bits) if weight_bits < FULL_PRECISION_BITS else weight_bits
    bits_w["fc"] = bits_w["conv0"]
    bits_a = {name: act_bits for name in act_point_names(num_blocks)}
    bits_a[FC_INPUT] = max(8, act_bits) if act_bits < FULL_PRECISION_BITS else act_bits
    return bits_w, bits_a


@dataclass
class QuantLayer:
    name: str
    weight: Tensor
    quantizer: WeightQuantizer

    def effective_weight(self, hard: bool = True) -> Tensor:
        return quantize_adaround(self.weight, self.quantizer, hard=hard)

    def nearest_weight(self) -> Tensor:
        return quantize_nearest(self.weight, self.quantizer)


class QuantNet:
    """Teacher architecture with quantized weights and activations.

    BN layers reuse the teacher's affine parameters and stored statistics. ``forward`` accepts
    an optional ``params`` mapping of effective weights (``conv0.weight`` ... ``fc.weight``,
    ``fc.bias``) that replaces the quantized ones, which is how perturbed copies of the
    quantized parameters are evaluated.
    """

    def __init__(
        self,
        teacher: TeacherNet,
        layers: dict[str, QuantLayer],
        act_quantizers: dict[str, ActivationQuantizer],
    ):
        self.teacher = teacher
        self.layers = layers
        self.act_quantizers = act_quantizers
        self.fc_bias = Tensor(teacher.fc_bias.data.copy())

    @property
    def num_layers(self) -> int:
        return self.teacher.num_layers

    @property
    def bits_w(self) -> dict[str, int]:
        return {name: layer.quantizer.bits for name, layer in self.layers.items()}

    @property
    def bits_a(self) -> dict[str, int]:
        return {name: aq.bits for name, aq in self.act_quantizers.items()}

    def quantizers(self) -> list[WeightQuantizer]:
        return [layer.quantizer for layer in self.layers.values() if layer.quantizer.enabled]

    def rounding_logits(self) -> list[Tensor]:
        return [q.logits for q in self.quantizers()]

    def latent_weights(self) -> list[Tensor]:
        return [layer.weight for layer in self.layers.values()]

    def activation_range_params(self) -> list[Tensor]:
        """Trainable bounds of every initialized activation quantizer."""
        return [p for aq in self.act_quantizers.values() for p in aq.range_params()]

    def sync_activation_ranges(self, release: bool = False) -> None:
        for aq in self.act_quantizers.values():
            aq.sync(release)

    def round_regularizer(self, beta: Optional[float] = None) -> Tensor:
        total = Tensor(0.0)
        for q in self.quantizers():
            total = ops.add(total, round_regularizer(q, beta))
        return total

    def effective_parameters(self, hard: bool = True) -> dict[str, Tensor]:
        """Quantized parameters theta_Q as constants, keyed like ``forward(params=...)``."""
        with no_grad():
            params = {
                f"{name}.weight": layer.effective_weight(hard).detach()
                for name, layer in self.layers.items()
            }
        params["fc.bias"] = self.fc_bias.detach()
        return params

    def _weights(self, params: Optional[Mapping[str, Tensor]], hard: bool, nearest: bool):
        if params is not None:
            missing = [f"{n}.weight" for n in self.layers if f"{n}.weight" not in params]
            if missing or "fc.bias" not in params:
                raise ShapeError(f"parameter override is missing {missing or ['fc.bias']}")
            return {n: params[f"{n}.weight"] for n in self.layers}, params["fc.bias"]
        if nearest:
            return {n: layer.nearest_weight() for n, layer in self.layers.items()}, self.fc_bias
        return {n: layer.effective_weight(hard) for n, layer in self.layers.items()}, self.fc_bias

    def forward(
        self,
        x: Tensor,
        params: Optional[Mapping[str, Tensor]] = None,
        hard: bool = True,
        nearest: bool = False,
    ) -> ForwardResult:
        """Quantized forward; ``hard`` thresholds h(V), ``nearest`` uses plain rounding."""
        self.teacher.check_input(x)
        weights, fc_bias = self._weights(params, hard, nearest)
        h = x
        activations: list[Tensor] = []
        batch_stats = []
        last = len(self.teacher.blocks) - 1
        for j, block in enumerate(self.teacher.blocks):
            z = ops.conv2d(h, weights[f"conv{j}"], stride=block.stride, padding=block.padding)
            batch_stats.append(ops.channel_stats(z.detach(), 1e-5))
            stored = Tensor(block.running_mean), Tensor(block.running_std)
            gamma, beta = block.gamma.detach(), block.beta.detach()
            h = ops.relu(ops.batchnorm_apply(z, *stored, gamma, beta))
            if j < last:
                h = self.act_quantizers[f"act{j}"](h)
            activations.append(h)
        features = self.act_quantizers[FC_INPUT](ops.global_avg_pool(h))
        logits = ops.add(ops.matmul(features, weights["fc"]), fc_bias)
        activations.append(logits)
        return ForwardResult(activations, features, logits, batch_stats)

    __call__ = forward

    def observe_activation_ranges(self, x: Tensor) -> None:
        """Set still-unset activation ranges from one batch, in layer order."""
        with no_grad():
            h = x
            last = len(self.teacher.blocks) - 1
            for j, block in enumerate(self.teacher.blocks):
                w = self.layers[f"conv{j}"].effective_weight(hard=True)
                z = ops.conv2d(h, w, stride=block.stride, padding=block.padding)
                stored = Tensor(block.running_mean), Tensor(block.running_std)
                h = ops.relu(ops.batchnorm_apply(z, *stored, block.gamma, block.beta))
                if j < last:
                    self.act_quantizers[f"act{j}"].observe(h)
                    h = self.act_quantizers[f"act{j}"](h)
            pooled = ops.global_avg_pool(h)
            self.act_quantizers[FC_INPUT].observe(pooled)

    def warn_if_uncalibrated(self) -> None:
        unset = [n for n, aq in self.act_quantizers.items() if aq.enabled and not aq.initialized]
        if unset:
            logger.warning(f"Activation ranges unset for {unset}; those points run unquantized")

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits = self.forward(Tensor(images[start : start + batch_size])).logits
                preds.append(np.argmax(logits.data, axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def clone(self) -> "QuantNet":
        """Independent copy sharing the (read-only) teacher."""
        layers = {}
        for name, layer in self.layers.items():
            q = layer.quantizer
            logits = None
            if q.logits is not None:
                logits = Tensor(q.logits.data.copy(), requires_grad=True, name=q.logits.name)
            codes = None if q.codes is None else q.codes.copy()
            weight = Tensor(layer.weight.data.copy(), requires_grad=layer.weight.requires_grad)
            layers[name] = QuantLayer(name, weight, replace(q, logits=logits, codes=codes))
        acts = {name: replace(aq, learned=None) for name, aq in self.act_quantizers.items()}
        twin = QuantNet(self.teacher, layers, acts)
        twin.fc_bias = Tensor(self.fc_bias.data.copy())
        return twin

    def freeze(self) -> None:
        for layer in self.layers.values():
            if layer.quantizer.enabled:
                layer.quantizer.freeze(layer.weight)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Latent weights, rounding logits, frozen codes, fc bias and activation ranges."""
        state: dict[str, np.ndarray] = {"fc.bias": self.fc_bias.data.copy()}
        for name, layer in self.layers.items():
            q = layer.quantizer
            state[f"{name}.weight"] = layer.weight.data.copy()
            if q.enabled:
                state[f"{name}.V"] = q.logits.data.copy()
                state[f"{name}.qparams"] = np.array(
                    [q.bits, q.scale, q.n, q.p, q.zero_point], dtype=np.float64
                )
                if q.codes is not None:
                    state[f"{name}.codes"] = q.codes.astype(np.float64)
        for name, aq in self.act_quantizers.items():
            if aq.enabled and aq.initialized:
                state[f"{name}.range"] = np.array([aq.lo, aq.hi])
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> "QuantNet":
        self.fc_bias = Tensor(np.asarray(state["fc.bias"], dtype=np.float64))
        for name, layer in self.layers.items():
            layer.weight = Tensor(np.asarray(state[f"{name}.weight"], dtype=np.float64))
            q = layer.quantizer
            if f"{name}.qparams" in state:
                bits, scale, n, p, zero_point = state[f"{name}.qparams"]
                q.bits, q.scale, q.n, q.p = int(bits), float(scale), int(n), int(p)
                q.zero_point = int(zero_point)
                q.logits = Tensor(state[f"{name}.V"], requires_grad=True, name=f"{name}.V")
                codes = state.get(f"{name}.codes")
                q.codes = None if codes is None else np.rint(codes).astype(np.int64)
        for name, aq in self.act_quantizers.items():
            if f"{name}.range" in state:
                aq.lo, aq.hi = (float(v) for v in state[f"{name}.range"])
        return self


def init_quantnet(
    teacher: TeacherNet, bits_w: Mapping[str, int], bits_a: Mapping[str, int]
) -> QuantNet:
    """Data-free quantized copy: scales from weight ranges, logits at nearest rounding."""
    num_blocks = len(teacher.blocks)
    layer_names = weight_layer_names(num_blocks)
    act_names = act_point_names(num_blocks)
    unknown = (set(bits_w) - set(layer_names)) | (set(bits_a) - set(act_names))
    if unknown:
        raise ShapeError(f"bit map names unknown layers {sorted(unknown)}")
    params = teacher.parameters()
    layers = {}
    for name in layer_names:
        weight = Tensor(params[f"{name}.weight"].data.copy(), name=f"{name}.weight")
        bits = bits_w.get(name, FULL_PRECISION_BITS)
        quantizer = WeightQuantizer.from_weight(weight, bits, name)
        layers[name] = QuantLayer(name, weight, quantizer)
    acts = {
        name: ActivationQuantizer(bits=bits_a.get(name, FULL_PRECISION_BITS), name=name)
        for name in act_names
    }
    q = QuantNet(teacher, layers, acts)
    logger.info(f"Initialized quantized net: weights {q.bits_w}, activations {q.bits_a}")
    return q
