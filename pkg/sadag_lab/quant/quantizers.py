"""Uniform weight quantization with adaptive rounding, and min-max activation quantization."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, ops
from ..errors import DegenerateRangeError

logger = logging.getLogger(__name__)

# stretch of the rectified sigmoid h(V) = clip(sigmoid(V) * (ZETA - GAMMA) + GAMMA, 0, 1)
GAMMA, ZETA = -0.1, 1.1
FULL_PRECISION_BITS = 32
ROUND_REG_WEIGHT = 0.01
MIN_ACT_RANGE = 1e-6

ArrayLike = Union[Tensor, np.ndarray]


def _array(w: ArrayLike) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)


def compute_scale(w: ArrayLike, bits: int) -> tuple[float, int, int]:
    """Step size s = (max - min) / (2^b - 1) and the unsigned code bounds (0, 2^b - 1)."""
    if bits < 2:
        raise ValueError(f"bit-width must be at least 2, got {bits}")
    arr = _array(w)
    lo, hi = float(arr.min()), float(arr.max())
    if not hi > lo:
        raise DegenerateRangeError(f"constant tensor (min = max = {lo}) has no quantization range")
    levels = 2**bits - 1
    return (hi - lo) / levels, 0, levels


def rectified_sigmoid(v: Tensor) -> Tensor:
    return ops.clip(ops.add(ops.scale(ops.sigmoid(v), ZETA - GAMMA), GAMMA), 0.0, 1.0)


@dataclass
class WeightQuantizer:
    """Per-tensor uniform quantizer with learnable rounding logits.

    Quantized values are ``s * (k - zero_point)`` for integer codes ``k`` in ``[n, p]``.
    ``bits == 32`` marks a layer left in full precision.
    """

    bits: int
    scale: float = 1.0
    n: int = 0
    p: int = 0
    zero_point: int = 0
    logits: Optional[Tensor] = None
    beta: float = 20.0
    codes: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_weight(cls, w: ArrayLike, bits: int, name: str = "weight") -> "WeightQuantizer":
        if bits >= FULL_PRECISION_BITS:
            return cls(bits=FULL_PRECISION_BITS)
        arr = _array(w)
        try:
            s, n, p = compute_scale(arr, bits)
        except DegenerateRangeError as exc:
            raise DegenerateRangeError(f"layer {name}: {exc}") from None
        zero_point = int(np.clip(np.floor(-arr.min() / s + 0.5), n, p))
        q = cls(bits=bits, scale=s, n=n, p=p, zero_point=zero_point)
        q.logits = Tensor(q.initial_logits(arr), requires_grad=True, name=f"{name}.V")
        return q

    @property
    def enabled(self) -> bool:
        return self.bits < FULL_PRECISION_BITS

    def initial_logits(self, w: np.ndarray) -> np.ndarray:
        """Logits with h(V) at the fractional part of w/s, on the nearest-rounding side of 0."""
        scaled = w / self.scale
        rest = scaled - np.floor(scaled)
        target = np.clip((rest - GAMMA) / (ZETA - GAMMA), 1e-12, 1 - 1e-12)
        v = np.log(target / (1 - target))
        up = (np.floor(scaled + 0.5) - np.floor(scaled)) > 0
        return np.where(up, np.maximum(v, 0.0), np.minimum(v, -1e-12))

    def soft_targets(self) -> Tensor:
        return rectified_sigmoid(self.logits)

    def hard_targets(self) -> np.ndarray:
        return (self.logits.data >= 0).astype(np.float64)

    def grid(self) -> np.ndarray:
        return self.scale * (np.arange(self.n, self.p + 1) - self.zero_point)

    def freeze(self, w: ArrayLike) -> np.ndarray:
        """Materialize integer codes from the hard rounding decisions."""
        base = np.floor(_array(w) / self.scale)
        self.codes = np.clip(base + self.zero_point + self.hard_targets(), self.n, self.p).astype(
            np.int64
        )
        return self.codes

    def codes_match(self, w: ArrayLike) -> bool:
        """Whether frozen codes still describe ``w``: same shape, each value within 1.5 steps.

        Weights outside the grid are compared against the grid edge they clip to.
        """
        arr = _array(w)
        if self.codes is None or self.codes.shape != arr.shape:
            return False
        grid = self.grid()
        gap = np.abs(self.dequantize_codes() - np.clip(arr, grid[0], grid[-1]))
        return bool(np.all(gap <= 1.5 * self.scale))

    def dequantize_codes(self) -> np.ndarray:
        if self.codes is None:
            raise ValueError("quantizer has no frozen codes")
        return self.scale * (self.codes - self.zero_point)


def quantize_nearest(w: ArrayLike, q: WeightQuantizer) -> Tensor:
    """s * (clip(round(w/s) + z, n, p) - z); identity for full-precision layers."""
    w = as_tensor(w)
    if not q.enabled:
        return w
    codes = ops.clip(ops.add(ops.round_ste(ops.scale(w, 1.0 / q.scale)), q.zero_point), q.n, q.p)
    return ops.scale(ops.sub(codes, q.zero_point), q.scale)


def quantize_adaround(w: ArrayLike, q: WeightQuantizer, hard: bool = False) -> Tensor:
    """s * (clip(floor(w/s) + z + h(V), n, p) - z), differentiable in V (and in w via STE)."""
    w = as_tensor(w)
    if not q.enabled:
        return w
    if q.codes is not None and not w.requires_grad:
        if not q.codes_match(w.data):
            raise ValueError(
                f"frozen codes no longer match weight of shape {w.shape}; freeze again"
            )
        return Tensor(q.dequantize_codes())
    base = ops.floor_ste(ops.scale(w, 1.0 / q.scale))
    h = Tensor(q.hard_targets()) if hard else q.soft_targets()
    codes = ops.clip(ops.add(ops.add(base, q.zero_point), h), q.n, q.p)
    return ops.scale(ops.sub(codes, q.zero_point), q.scale)


def round_regularizer(q: WeightQuantizer, beta: Optional[float] = None) -> Tensor:
    """sum(1 - |2 h(V) - 1|^beta); zero exactly when every h is 0 or 1."""
    if not q.enabled:
        return Tensor(0.0)
    beta = q.beta if beta is None else beta
    if beta < 2:
        raise ValueError(f"rounding regularizer exponent must be >= 2, got {beta}")
    centered = ops.abs(ops.sub(ops.scale(q.soft_targets(), 2.0), 1.0))
    return ops.sum(ops.sub(1.0, ops.power(centered, beta)))


@dataclass
class BetaSchedule:
    """Linear anneal of the rounding exponent from ``start`` to ``end`` over ``total`` steps."""

    total: int
    start: float = 20.0
    end: float = 2.0

    def __call__(self, step: int) -> float:
        if self.total <= 1:
            return self.end
        frac = min(max(step / (self.total - 1), 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass
class ActivationQuantizer:
    """Per-tensor affine min-max quantizer.

    The first observed batch sets ``lo``/``hi``. Calibration may then tune them as leaf tensors
    (see ``range_params``); the backward pass rounds straight through, so the step size gets
    the ``round(u) - u`` gradient and clipped values pass their gradient to the bound they hit.
    """

    bits: int
    lo: Optional[float] = None
    hi: Optional[float] = None
    name: str = "act"
    learned: Optional[tuple[Tensor, Tensor]] = field(default=None, repr=False, compare=False)

    @property
    def enabled(self) -> bool:
        return self.bits < FULL_PRECISION_BITS

    @property
    def initialized(self) -> bool:
        return self.lo is not None and self.hi is not None

    def observe(self, x: ArrayLike) -> None:
        if self.initialized or not self.enabled:
            return
        arr = _array(x)
        lo, hi = float(arr.min()), float(arr.max())
        if not hi - lo >= MIN_ACT_RANGE:
            logger.warning(f"{self.name}: constant activations ({lo}); widening range to 1e-6")
            hi = lo + MIN_ACT_RANGE
        self.lo, self.hi = lo, hi
        logger.debug(f"{self.name}: range set to [{lo:.6g}, {hi:.6g}]")

    def range_params(self) -> list[Tensor]:
        """Trainable ``lo`` and ``hi``; the forward pass reads them until ``sync(release=True)``."""
        if not (self.enabled and self.initialized):
            return []
        if self.learned is None:
            self.learned = (
                Tensor(np.array(self.lo), requires_grad=True, name=f"{self.name}.lo"),
                Tensor(np.array(self.hi), requires_grad=True, name=f"{self.name}.hi"),
            )
        return list(self.learned)

    def sync(self, release: bool = False) -> None:
        """Copy trained bounds back into ``lo``/``hi``, keeping the range at least 1e-6 wide."""
        if self.learned is None:
            return
        lo_t, hi_t = self.learned
        lo, hi = float(lo_t.data), float(hi_t.data)
        if not hi - lo >= MIN_ACT_RANGE:
            hi = lo + MIN_ACT_RANGE
            hi_t.data = np.array(hi)
        self.lo, self.hi = lo, hi
        if release:
            self.learned = None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled or not self.initialized:
            return x
        levels = 2**self.bits - 1
        if self.learned is not None:
            lo_t, hi_t = self.learned
            step = ops.scale(ops.sub(hi_t, lo_t), 1.0 / levels)
            codes = ops.round_ste(ops.clip(ops.div(ops.sub(x, lo_t), step), 0.0, levels))
            return ops.add(ops.mul(codes, step), lo_t)
        s = (self.hi - self.lo) / levels
        codes = ops.round_ste(ops.clip(ops.scale(ops.sub(x, self.lo), 1.0 / s), 0.0, levels))
        return ops.add(ops.scale(codes, s), self.lo)
