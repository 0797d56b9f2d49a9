"""Closed-form per-sample gradients of the reconstruction loss at the FC layer.

For the FC term 0.5 * ||f_Q(x) - f_FP(x)||^2 of the reconstruction loss, the gradient with respect
to the FC weight W (shape d x C) is the outer product a^T g with a the FC input and g the logit
difference. Flattening is row-major over W, so index ``i * C + c`` holds ``a_i * g_c``.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..autodiff import Tensor, as_tensor, grad, no_grad, ops
from ..errors import ShapeError, ZeroGradientError
from ..nets.teacher import ForwardResult, TeacherNet
from ..quant.quantnet import QuantNet

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9


@dataclass
class GradVector:
    values: np.ndarray
    normalized: bool = False
    sample_id: Optional[int] = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.normalized and abs(np.linalg.norm(self.values) - 1.0) > UNIT_TOL:
            raise ValueError(f"vector marked normalized has norm {np.linalg.norm(self.values)}")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def unit(self) -> "GradVector":
        norm = self.norm
        if norm == 0.0:
            raise ZeroGradientError(f"sample {self.sample_id}: zero gradient cannot be normalized")
        return GradVector(self.values / norm, normalized=True, sample_id=self.sample_id)


def outer_gradients(features: Tensor, logit_diff: Tensor) -> Tensor:
    """Row i is flatten(a_i^T g_i); differentiable in both arguments."""
    features, logit_diff = as_tensor(features), as_tensor(logit_diff)
    n, d = features.shape
    if logit_diff.shape[0] != n:
        raise ShapeError(f"{n} feature rows but {logit_diff.shape[0]} logit rows")
    c = logit_diff.shape[1]
    outer = ops.mul(ops.reshape(features, (n, d, 1)), ops.reshape(logit_diff, (n, 1, c)))
    return ops.reshape(outer, (n, d * c))


def gradients_from_forward(q_out: ForwardResult, fp_out: ForwardResult) -> Tensor:
    return outer_gradients(q_out.features, ops.sub(q_out.logits, fp_out.logits))


def fc_gradients(
    q: QuantNet, t: TeacherNet, X: Union[Tensor, np.ndarray], hard: bool = True
) -> Tensor:
    """Per-sample FC gradients for a batch, shape (N, d*C); differentiable in ``X``."""
    X = as_tensor(X)
    return gradients_from_forward(q.forward(X, hard=hard), t.forward(X, mode="eval"))


def per_sample_fc_gradient(
    q: QuantNet,
    t: TeacherNet,
    x: Union[Tensor, np.ndarray],
    normalize: bool = False,
    sample_id: Optional[int] = None,
) -> GradVector:
    x = as_tensor(x)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    if x.shape[0] != 1:
        raise ShapeError(f"expected a single sample, got batch of {x.shape[0]}")
    with no_grad():
        row = fc_gradients(q, t, x.detach()).data[0]
    vec = GradVector(row, sample_id=sample_id)
    return vec.unit() if normalize else vec


def autodiff_fc_gradient(
    q: QuantNet, t: TeacherNet, x: Union[Tensor, np.ndarray], create_graph: bool = False
) -> Tensor:
    """FC-weight gradient of the FC reconstruction term by reverse-mode differentiation."""
    x = as_tensor(x)
    params = q.effective_parameters()
    fc_weight = Tensor(params["fc.weight"].data, requires_grad=True, name="fc.weight")
    params["fc.weight"] = fc_weight
    diff = ops.sub(q.forward(x, params=params).logits, t.forward(x).logits)
    term = ops.scale(ops.sum(ops.mul(diff, diff)), 0.5)
    (g,) = grad(term, [fc_weight], create_graph=create_graph)
    return ops.reshape(g, (g.size,))


@dataclass
class FCHessianBlocks:
    """Hessian of the FC reconstruction term: C identical d x d Gram blocks.

    Parameters are ordered class-major (column c of W occupies indices ``c*d .. c*d + d - 1``),
    which makes the Hessian ``kron(I_C, A^T A)``.
    """

    gram: np.ndarray
    num_classes: int

    @property
    def dim(self) -> int:
        return int(self.gram.shape[0])

    def dense(self) -> np.ndarray:
        return np.kron(np.eye(self.num_classes), self.gram)

    def block(self, c: int) -> np.ndarray:
        return self.dense()[c * self.dim : (c + 1) * self.dim, c * self.dim : (c + 1) * self.dim]

    def off_block_mask(self) -> np.ndarray:
        return np.kron(1 - np.eye(self.num_classes), np.ones((self.dim, self.dim))).astype(bool)


def fc_hessian_reference(
    a_batch: Union[Tensor, np.ndarray], num_classes: int = 1
) -> FCHessianBlocks:
    a = a_batch.data if isinstance(a_batch, Tensor) else np.asarray(a_batch, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"expected an (N, d) batch with N >= 1, got {a.shape}")
    return FCHessianBlocks(gram=a.T @ a, num_classes=num_classes)


def _values(v: Union[GradVector, np.ndarray, Sequence[float]]) -> np.ndarray:
    if isinstance(v, GradVector):
        return v.values
    return np.asarray(v, dtype=np.float64).reshape(-1)


def cosine_distance(u: Union[GradVector, np.ndarray], v: Union[GradVector, np.ndarray]) -> float:
    """1 - cos(u, v), clipped to [0, 2]."""
    a, b = _values(u), _values(v)
    if a.shape != b.shape:
        raise ShapeError(f"vectors of length {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroGradientError("cosine distance of a zero vector")
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def row_cosine_distances(
    u: Tensor, v: Tensor, min_norm: float = 1e-12, exact_identity: bool = True
) -> tuple[Tensor, np.ndarray]:
    """Per-row 1 - cos(u_i, v_i), differentiable; rows where either side vanishes give 0.

    With ``exact_identity`` bitwise-identical rows give exactly 0 (D is stationary there).
    Returns the distances and the mask of rows that were valid.
    """
    if u.shape != v.shape:
        raise ShapeError(f"row shapes {u.shape} and {v.shape} differ")
    u_unit, u_ok = ops.normalize_rows(u, min_norm)
    v_unit, v_ok = ops.normalize_rows(v, min_norm)
    valid = u_ok & v_ok
    live = valid.copy()
    if exact_identity:
        live &= ~np.all(u.data == v.data, axis=1)
    cos = ops.sum(ops.mul(u_unit, v_unit), axis=1)
    dist = ops.mul(ops.sub(1.0, cos), Tensor(live.astype(np.float64)))
    return dist, valid


def aggregate_cosine(subset_grads: np.ndarray, pool_grads: np.ndarray) -> float:
    """cos(sum of subset rows, sum of pool rows)."""
    s, p = np.asarray(subset_grads).sum(axis=0), np.asarray(pool_grads).sum(axis=0)
    ns, np_ = np.linalg.norm(s), np.linalg.norm(p)
    if ns == 0 or np_ == 0:
        raise ZeroGradientError("aggregate gradient is zero")
    return float(s @ p / (ns * np_))


def batched_fc_gradients(
    q: QuantNet, t: TeacherNet, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    rows = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            rows.append(fc_gradients(q, t, Tensor(images[start : start + batch_size])).data)
    return np.concatenate(rows, axis=0)


def pool_gradient_cosine(
    subset: Union[np.ndarray, Sequence[int]],
    pool: np.ndarray,
    q: QuantNet,
    t: TeacherNet,
) -> float:
    """Cosine between the summed FC gradients of ``subset`` (pool indices) and of ``pool``."""
    pool = np.asarray(pool, dtype=np.float64)
    idx = np.asarray(subset, dtype=np.int64)
    if pool.shape[0] == 0 or idx.size == 0:
        raise ShapeError("subset and pool must be non-empty")
    if idx.min() < 0 or idx.max() >= pool.shape[0]:
        raise ShapeError("subset indices fall outside the pool")
    grads = batched_fc_gradients(q, t, pool)
    return aggregate_cosine(grads[idx], grads)
