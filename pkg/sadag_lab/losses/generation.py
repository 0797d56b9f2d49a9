"""Objectives for synthesizing calibration images: BN matching, gradient matching, diversity."""

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, grad, no_grad, ops
from ..errors import NotNormalizedError, ShapeError
from ..nets.generator import GeneratorNet
from ..nets.teacher import TeacherNet
from ..quant.quantnet import QuantNet
from .gradients import (
    GradVector,
    UNIT_TOL,
    autodiff_fc_gradient,
    fc_gradients,
    gradients_from_forward,
    row_cosine_distances,
)

logger = logging.getLogger(__name__)

OFFSET_SCALE = 1e-3
MIN_ASCENT_NORM = 1e-12


# -- batch-norm statistics ----------------------------------------------------------------------


def stored_stats(t: TeacherNet) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(block.running_mean, block.running_std) for block in t.blocks]


def bn_loss_from_stats(
    batch_stats: Sequence[tuple[Tensor, Tensor]],
    stored: Sequence[tuple[np.ndarray, np.ndarray]],
) -> Tensor:
    """sum_j ||mu_j(batch) - mu_j||^2 + ||sigma_j(batch) - sigma_j||^2."""
    if len(batch_stats) != len(stored):
        raise ShapeError(f"{len(batch_stats)} batch statistics for {len(stored)} BN layers")
    total = Tensor(0.0)
    for (mu, std), (mu_ref, std_ref) in zip(batch_stats, stored):
        dm = ops.sub(mu, Tensor(mu_ref))
        ds = ops.sub(std, Tensor(std_ref))
        total = ops.add(total, ops.add(ops.sum(ops.mul(dm, dm)), ops.sum(ops.mul(ds, ds))))
    return total


def bn_loss(t: TeacherNet, X_syn: Union[Tensor, np.ndarray]) -> Tensor:
    """BN statistics loss of a synthetic batch pushed through the frozen teacher."""
    X_syn = as_tensor(X_syn)
    if X_syn.ndim != 4 or X_syn.shape[0] < 2:
        raise ShapeError(f"BN loss needs a batch of at least 2 images, got shape {X_syn.shape}")
    return bn_loss_from_stats(t.forward(X_syn, mode="eval").batch_stats, stored_stats(t))


# -- diversity ----------------------------------------------------------------------------------


def _rows(grads: Union[Tensor, np.ndarray, Sequence[GradVector]]) -> Tensor:
    if isinstance(grads, Tensor):
        return grads
    if isinstance(grads, np.ndarray):
        return Tensor(grads)
    return Tensor(np.stack([g.values for g in grads]))


def diversity_loss(grads: Union[Tensor, np.ndarray, Sequence[GradVector]], zeta: float) -> Tensor:
    """sum over ordered pairs i != j of max(0, |g_i . g_j| - zeta) for unit rows.

    All-zero rows (vanished gradients) are allowed and contribute nothing; any other row must
    be unit length.
    """
    if zeta < 0:
        raise ValueError(f"zeta must be non-negative, got {zeta}")
    rows = _rows(grads)
    if rows.ndim != 2:
        raise ShapeError(f"expected (B, D) gradient rows, got {rows.shape}")
    norms = np.sqrt((rows.data * rows.data).sum(axis=1))
    bad = (norms != 0) & (np.abs(norms - 1.0) > UNIT_TOL)
    if np.any(bad):
        raise NotNormalizedError(f"rows {np.flatnonzero(bad).tolist()} are not unit vectors")
    gram = ops.matmul(rows, ops.transpose(rows))
    off_diagonal = Tensor(1.0 - np.eye(rows.shape[0]))
    excess = ops.relu(ops.sub(ops.abs(gram), zeta))
    return ops.sum(ops.mul(excess, off_diagonal))


# -- neighbor perturbation and gradient matching ------------------------------------------------


@dataclass
class NeighborPerturbation:
    """Embedding perturbations of norm nu; ``fallback`` marks rows that used the random offset."""

    eps: np.ndarray
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def fallback_count(self) -> int:
        return int(np.sum(self.fallback))


def _unit_offsets(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    offsets = rng.standard_normal(shape)
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    return offsets / np.where(norms == 0, 1.0, norms)


def _ascent(
    g_net: GeneratorNet,
    z: np.ndarray,
    g0: np.ndarray,
    eps0: np.ndarray,
    gradient_fn: Callable[[Tensor], Tensor],
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum_i D(g0_i, g(G(z_i + eps))) in eps, evaluated at eps0."""
    E = Tensor(eps0, requires_grad=True, name="eps")
    g1 = gradient_fn(g_net(ops.add(Tensor(z), E)))
    dist, valid = row_cosine_distances(Tensor(g0), g1)
    (direction,) = grad(ops.sum(dist), [E])
    return direction.data, valid


def neighbor_perturbation(
    g_net: GeneratorNet,
    z: Union[Tensor, np.ndarray],
    q: QuantNet,
    t: TeacherNet,
    nu: float,
    rng: np.random.Generator,
    g0: Optional[np.ndarray] = None,
    second_order: bool = False,
) -> NeighborPerturbation:
    """Least-gradient-similarity perturbation of each embedding, rescaled to norm ``nu``.

    The ascent direction of D(g(z), g(z + eps)) with the first gradient held fixed is taken at
    a random offset eps0 of norm 1e-3 * nu, since at eps = 0 it vanishes identically. Rows whose
    direction vanishes fall back to nu * eps0 / ||eps0||. With ``second_order`` each embedding
    is processed alone and its FC gradient comes from reverse-mode differentiation with
    ``create_graph``, so the ascent step differentiates through a gradient.

    The default batched path pushes all rows through the generator together, and its BN layers
    normalize with the batch statistics. Row i's ascent direction therefore also carries the
    terms D_j for j != i that reach eps_i through those shared statistics, so it is the gradient
    of the summed distance, not of row i's distance alone. The ``second_order`` path runs one
    row at a time and is free of that coupling; there the generator's BN normalizes each image
    with its own spatial statistics.
    """
    if nu <= 0:
        raise ValueError(f"neighborhood radius must be positive, got {nu}")
    z_arr = as_tensor(z).data
    single = z_arr.ndim == 1
    if single:
        z_arr = z_arr[None, :]
    if g0 is None:
        with no_grad():
            g0 = fc_gradients(q, t, g_net(Tensor(z_arr))).data
    directions = _unit_offsets(rng, z_arr.shape)
    eps0 = directions * (OFFSET_SCALE * nu)

    if second_order:

        def autodiff_rows(x: Tensor) -> Tensor:
            g = autodiff_fc_gradient(q, t, x, create_graph=True)
            return ops.reshape(g, (1, g.size))

        ascent = np.zeros_like(z_arr)
        valid = np.zeros(z_arr.shape[0], dtype=bool)
        for i in range(z_arr.shape[0]):
            row, ok = _ascent(
                g_net, z_arr[i : i + 1], g0[i : i + 1], eps0[i : i + 1], autodiff_rows
            )
            ascent[i], valid[i] = row[0], ok[0]
    else:
        ascent, valid = _ascent(g_net, z_arr, g0, eps0, lambda x: fc_gradients(q, t, x))

    norms = np.linalg.norm(ascent, axis=1)
    ok = valid & np.isfinite(norms) & (norms > MIN_ASCENT_NORM)
    safe = np.where(ok, norms, 1.0)[:, None]
    eps = np.where(ok[:, None], nu * ascent / safe, nu * directions)
    fallback = ~ok
    if np.any(fallback):
        logger.debug(f"Neighbor perturbation used the random offset for {fallback.sum()} rows")
    if single:
        return NeighborPerturbation(eps[0], fallback[:1])
    return NeighborPerturbation(eps, fallback)


def literal_perturbation_gradient(
    g_net: GeneratorNet, z: Union[Tensor, np.ndarray], q: QuantNet, t: TeacherNet
) -> np.ndarray:
    """Gradient in z of D(g(z), g(z)) with both sides live, by double backprop.

    This is the perturbation written without an offset; it vanishes because D(g, g) is
    stationary in its second argument at the first.
    """
    z_arr = as_tensor(z).data.reshape(1, -1)
    Z = Tensor(z_arr, requires_grad=True, name="z")
    g = autodiff_fc_gradient(q, t, g_net(Z), create_graph=True)
    g = ops.reshape(g, (1, g.size))
    dist, _ = row_cosine_distances(g, g, min_norm=0.0, exact_identity=False)
    (gz,) = grad(ops.sum(dist), [Z])
    return gz.data.reshape(-1)


class GradMatchLoss(NamedTuple):
    value: Tensor
    skipped_pairs: int


def grad_match_from_gradients(g: Tensor, g_neighbor: Tensor) -> GradMatchLoss:
    dist, valid = row_cosine_distances(g, g_neighbor)
    skipped = int(np.sum(~valid))
    if skipped:
        logger.debug(f"Gradient matching skipped {skipped} pairs with a vanished gradient")
    return GradMatchLoss(ops.sum(dist), skipped)


def grad_match_loss(
    g_net: GeneratorNet,
    Z: Union[Tensor, np.ndarray],
    q: QuantNet,
    t: TeacherNet,
    perturbations: Union[np.ndarray, NeighborPerturbation],
) -> GradMatchLoss:
    """sum_i D(g(G(z_i)), g(G(z_i + eps_i))) with FC-layer gradients of the frozen nets."""
    Z = as_tensor(Z)
    eps = perturbations.eps if isinstance(perturbations, NeighborPerturbation) else perturbations
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != Z.shape:
        raise ShapeError(f"{eps.shape} perturbations for embeddings of shape {Z.shape}")
    g = fc_gradients(q, t, g_net(Z))
    g_neighbor = fc_gradients(q, t, g_net(ops.add(Z, Tensor(eps))))
    return grad_match_from_gradients(g, g_neighbor)


# -- combined objective -------------------------------------------------------------------------


@dataclass
class LossTerms:
    """Values of the generation objective; ``None`` marks terms skipped by a zero weight."""

    total: Tensor
    bn: float
    diverse: Optional[float] = None
    grad: Optional[float] = None
    skipped_pairs: int = 0
    fallback_count: int = 0


def final_loss(
    t: TeacherNet,
    q: QuantNet,
    g_net: GeneratorNet,
    Z: Tensor,
    lambda1: float,
    lambda2: float,
    zeta: float,
    nu: float,
    rng: Optional[np.random.Generator] = None,
    perturbations: Optional[Union[np.ndarray, NeighborPerturbation]] = None,
) -> LossTerms:
    """L_BN + lambda1 * L_DIVERSE + lambda2 * L_GRAD on one minibatch of embeddings.

    Terms with a zero weight are not computed, so lambda1 = lambda2 = 0 is exactly the BN loss.
    """
    Z = as_tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ShapeError(f"generation needs a minibatch of at least 2 embeddings, got {Z.shape}")
    x = g_net(Z)
    fp_out = t.forward(x, mode="eval")
    bn = bn_loss_from_stats(fp_out.batch_stats, stored_stats(t))
    terms = LossTerms(total=bn, bn=bn.item())
    if not (lambda1 or lambda2):
        return terms

    g = gradients_from_forward(q.forward(x, hard=True), fp_out)
    total = bn
    if lambda1:
        unit, _ = ops.normalize_rows(g, MIN_ASCENT_NORM)
        diverse = diversity_loss(unit, zeta)
        terms.diverse = diverse.item()
        total = ops.add(total, ops.scale(diverse, lambda1))
    if lambda2:
        if perturbations is None:
            if rng is None:
                raise ValueError("an rng is required to draw neighbor perturbations")
            perturbations = neighbor_perturbation(g_net, Z.data, q, t, nu, rng, g0=g.data)
        if isinstance(perturbations, NeighborPerturbation):
            terms.fallback_count = perturbations.fallback_count
            perturbations = perturbations.eps
        g_neighbor = fc_gradients(q, t, g_net(ops.add(Z, Tensor(perturbations))))
        matched = grad_match_from_gradients(g, g_neighbor)
        terms.grad = matched.value.item()
        terms.skipped_pairs = matched.skipped_pairs
        total = ops.add(total, ops.scale(matched.value, lambda2))
    terms.total = total
    return terms
