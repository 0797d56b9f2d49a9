"""Split the post-calibration objective into its sharpness, improvement and baseline parts.

After one descent step ``theta* = theta - alpha * grad L_R(X_T; theta)`` on the effective
quantized parameters, the validation objective ``L_SAM(theta*) + L_R(theta*)`` decomposes into

* ``sharpness``: ``L_R(theta* + eps) - L_R(theta*)`` with ``eps`` the radius-``rho`` ascent step,
* ``improvement``: ``L_R(theta*) - L_R(theta)``,
* ``baseline``: ``L_R(theta)``, which does not depend on the calibration set.

First-order predictions of the first two are ``rho * ||grad L_R(X_V; theta*)||`` and
``-alpha * grad L_R(X_T; theta) . grad L_R(X_V; theta)``.
"""

import logging
from dataclasses import dataclass
from typing import Union

import numpy as np

from ..autodiff import Tensor, grad, no_grad
from ..datasets import LabeledDataset
from ..errors import ZeroGradientError
from ..losses.reconstruction import ascent_perturbation, reconstruction_loss
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet

logger = logging.getLogger(__name__)

Images = Union[LabeledDataset, np.ndarray]


@dataclass
class TotalLossDecomposition:
    sharpness: float
    improvement: float
    baseline: float
    predicted_sharpness: float
    predicted_improvement: float
    gradient_cosine: float

    @property
    def total(self) -> float:
        return self.sharpness + self.improvement + self.baseline


def _as_images(X: Images) -> Tensor:
    return Tensor(X.images if isinstance(X, LabeledDataset) else np.asarray(X, dtype=np.float64))


def _loss_and_grads(q, t, x, theta: dict[str, np.ndarray]):
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in theta.items()}
    loss = reconstruction_loss(q, t, x, params=leaves)
    grads = grad(loss, list(leaves.values()))
    return loss.item(), {k: g.data for k, g in zip(leaves, grads)}


def _loss(q, t, x, theta: dict[str, np.ndarray]) -> float:
    with no_grad():
        return reconstruction_loss(q, t, x, params={k: Tensor(v) for k, v in theta.items()}).item()


def _flat(grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([g.reshape(-1) for g in grads.values()])


def decompose_total_loss(
    q: QuantNet,
    t: TeacherNet,
    X_T: Images,
    X_V: Images,
    alpha: float,
    rho: float,
) -> TotalLossDecomposition:
    """Evaluate every term of the decomposition with summed reconstruction losses."""
    if alpha < 0 or rho < 0:
        raise ValueError(f"alpha and rho must be non-negative, got {alpha}, {rho}")
    x_t, x_v = _as_images(X_T), _as_images(X_V)
    theta = {k: v.data for k, v in q.effective_parameters(hard=True).items()}

    _, g_t = _loss_and_grads(q, t, x_t, theta)
    base, g_v = _loss_and_grads(q, t, x_v, theta)
    theta_star = {k: theta[k] - alpha * g_t[k] for k in theta}
    after, g_v_star = _loss_and_grads(q, t, x_v, theta_star)

    keys = list(theta)
    eps = ascent_perturbation([g_v_star[k] for k in keys], rho)
    perturbed = _loss(q, t, x_v, {k: theta_star[k] + e for k, e in zip(keys, eps)})

    flat_t, flat_v = _flat(g_t), _flat(g_v)
    norms = np.linalg.norm(flat_t) * np.linalg.norm(flat_v)
    if norms == 0:
        raise ZeroGradientError("a reconstruction gradient is zero; cosine undefined")
    result = TotalLossDecomposition(
        sharpness=perturbed - after,
        improvement=after - base,
        baseline=base,
        predicted_sharpness=rho * float(np.linalg.norm(_flat(g_v_star))),
        predicted_improvement=-alpha * float(flat_t @ flat_v),
        gradient_cosine=float(flat_t @ flat_v / norms),
    )
    logger.debug(f"Total-loss decomposition: {result}")
    return result
