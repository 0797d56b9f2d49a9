"""Layer-wise reconstruction loss and the sharpness-aware probe built on it."""

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, grad, no_grad, ops
from ..errors import ShapeError, ZeroGradientError
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet

logger = logging.getLogger(__name__)

REDUCTIONS = ("sum", "mean")


def reconstruction_from_activations(
    fp_activations: Sequence[Tensor],
    q_activations: Sequence[Tensor],
    reduction: str = "sum",
) -> Tensor:
    """0.5 * sum over samples and layers of squared output differences."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if len(fp_activations) != len(q_activations):
        raise ShapeError(
            f"architecture mismatch: {len(fp_activations)} vs {len(q_activations)} layers"
        )
    total: Optional[Tensor] = None
    for layer, (fp, qa) in enumerate(zip(fp_activations, q_activations)):
        fp, qa = as_tensor(fp), as_tensor(qa)
        if fp.shape != qa.shape:
            raise ShapeError(f"layer {layer}: output shapes {fp.shape} and {qa.shape} differ")
        diff = ops.sub(fp, qa)
        term = ops.sum(ops.mul(diff, diff))
        total = term if total is None else ops.add(total, term)
    if total is None:
        raise ShapeError("no layers to compare")
    loss = ops.scale(total, 0.5)
    if reduction == "mean":
        loss = ops.scale(loss, 1.0 / as_tensor(fp_activations[0]).shape[0])
    return loss


def teacher_activations(t: TeacherNet, x: Tensor) -> list[Tensor]:
    return t.forward(x, mode="eval").activations


def reconstruction_loss(
    q: QuantNet,
    t: TeacherNet,
    X: Union[Tensor, np.ndarray],
    reduction: str = "sum",
    hard: bool = True,
    params: Optional[Mapping[str, Tensor]] = None,
    fp_activations: Optional[Sequence[Tensor]] = None,
) -> Tensor:
    """Reconstruction loss between teacher and quantized outputs on a batch.

    Differentiable with respect to the quantized parameters (rounding logits, or ``params``
    when given) and to ``X``. ``fp_activations`` may carry precomputed teacher outputs.
    """
    X = as_tensor(X)
    if q.num_layers != t.num_layers:
        raise ShapeError(f"architecture mismatch: {q.num_layers} vs {t.num_layers} layers")
    if fp_activations is None:
        fp_activations = teacher_activations(t, X)
    q_activations = q.forward(X, params=params, hard=hard).activations
    return reconstruction_from_activations(fp_activations, q_activations, reduction)


@dataclass
class SharpnessProbe:
    """Loss at theta and at theta + eps with ||eps|| = rho along the normalized gradient."""

    rho: float
    base_loss: float
    perturbed_loss: float
    epsilon_norm: float = 0.0

    @property
    def sharpness(self) -> float:
        return self.perturbed_loss - self.base_loss


def ascent_perturbation(grads: Sequence[Union[Tensor, np.ndarray]], rho: float) -> list[np.ndarray]:
    """eps = rho * g / ||g|| over the concatenation of all gradient tensors."""
    if rho < 0:
        raise ValueError(f"radius must be non-negative, got {rho}")
    arrays = [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in grads]
    if rho == 0:
        return [np.zeros_like(a) for a in arrays]
    norm = float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))
    if norm == 0.0:
        raise ZeroGradientError("gradient is exactly zero; ascent direction undefined")
    return [rho * a / norm for a in arrays]


def sharpness_probe(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Union[Tensor, np.ndarray]],
    rho: float,
) -> SharpnessProbe:
    """Evaluate ``loss_fn`` at ``params`` and at the one-step ascent point of radius ``rho``."""
    leaves = {k: Tensor(as_tensor(v).data, requires_grad=True, name=k) for k, v in params.items()}
    base = loss_fn(leaves)
    if rho == 0:
        value = base.item()
        return SharpnessProbe(rho=0.0, base_loss=value, perturbed_loss=value, epsilon_norm=0.0)
    grads = grad(base, list(leaves.values()))
    eps = ascent_perturbation(grads, rho)
    with no_grad():
        shifted = {k: Tensor(leaf.data + e) for (k, leaf), e in zip(leaves.items(), eps)}
        perturbed = loss_fn(shifted).item()
    eps_norm = float(np.sqrt(sum(float(np.sum(e * e)) for e in eps)))
    return SharpnessProbe(
        rho=rho, base_loss=base.item(), perturbed_loss=perturbed, epsilon_norm=eps_norm
    )


def _quant_loss_fn(
    q: QuantNet, t: TeacherNet, X: Tensor, reduction: str
) -> Callable[[dict[str, Tensor]], Tensor]:
    with no_grad():
        fp = [a.detach() for a in teacher_activations(t, X)]

    def loss_fn(params: dict[str, Tensor]) -> Tensor:
        return reconstruction_loss(q, t, X, reduction, params=params, fp_activations=fp)

    return loss_fn


def sam_epsilon(
    q: QuantNet, t: TeacherNet, X: Union[Tensor, np.ndarray], rho: float, hard: bool = True
) -> dict[str, np.ndarray]:
    """Perturbation over the effective quantized parameters: rho * grad / ||grad||."""
    X = as_tensor(X).detach()
    theta = q.effective_parameters(hard)
    if rho == 0:
        return {k: np.zeros(v.shape) for k, v in theta.items()}
    leaves = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in theta.items()}
    loss = _quant_loss_fn(q, t, X, "sum")(leaves)
    eps = ascent_perturbation(grad(loss, list(leaves.values())), rho)
    return dict(zip(leaves.keys(), eps))


def sam_loss(
    q: QuantNet,
    t: TeacherNet,
    X: Union[Tensor, np.ndarray],
    rho: float,
    hard: bool = True,
    reduction: str = "sum",
) -> SharpnessProbe:
    """Base and worst-case-neighbor reconstruction loss of the quantized parameters."""
    X = as_tensor(X).detach()
    return sharpness_probe(_quant_loss_fn(q, t, X, reduction), q.effective_parameters(hard), rho)
