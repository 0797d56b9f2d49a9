"""Reverse-mode gradients and the finite-difference oracle."""

import logging
from typing import Callable, Sequence, Union

import numpy as np

from ..errors import NonFiniteError, ShapeError
from .ops import add
from .tensor import Tensor, no_grad, set_grad_enabled

logger = logging.getLogger(__name__)


def _ancestry(output: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``output``, ordered by creation (parents first)."""
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t.node.parents)
    return sorted(seen.values(), key=lambda t: t.node.seq)


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors outside the output's ancestry receive a zero gradient. With ``create_graph`` the
    backward computation is itself recorded so the results can be differentiated again.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    targets = {id(t) for t in wrt}
    order = _ancestry(output)

    # only propagate through nodes that lead to a requested tensor
    relevant = set(targets)
    for t in order:
        if any(id(p) in relevant for p in t.node.parents):
            relevant.add(id(t))

    grads: dict[int, Tensor] = {}
    with set_grad_enabled(create_graph):
        grads[id(output)] = Tensor(np.ones(output.shape))
        for t in reversed(order):
            upstream = grads.get(id(t))
            if upstream is None or id(t) not in relevant:
                continue
            parents = t.node.parents
            if not any(id(p) in relevant for p in parents):
                continue
            parent_grads = t.node.fn.backward(upstream, *parents)
            for parent, g in zip(parents, parent_grads):
                if g is None or id(parent) not in relevant:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"{t.node.tag} backward gave {g.shape} for parent shape {parent.shape}"
                    )
                previous = grads.get(id(parent))
                grads[id(parent)] = g if previous is None else add(previous, g)

    results = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            results.append(Tensor(np.zeros(t.shape)))
        elif create_graph:
            results.append(g)
        else:
            results.append(g.detach())
    return results


def _scalar(value: Union[Tensor, float, np.ndarray]) -> float:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ShapeError(f"finite_diff needs a scalar function, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff(
    f: Callable[[Tensor], Union[Tensor, float]],
    at: Union[Tensor, np.ndarray, Sequence[float]],
    step: float = 1e-5,
) -> Tensor:
    """Central-difference estimate of df/dat, one coordinate at a time."""
    if not step > 0:
        raise ValueError(f"finite_diff step must be positive, got {step}")
    base = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64)
    estimate = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += step
            minus[idx] -= step
            f_plus, f_minus = _scalar(f(Tensor(plus))), _scalar(f(Tensor(minus)))
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite function value probing index {idx}")
            estimate[idx] = (f_plus - f_minus) / (2.0 * step)
    return Tensor(estimate)


def relative_error(actual: Union[Tensor, np.ndarray], expected: Union[Tensor, np.ndarray]) -> float:
    """||actual - expected|| / max(||expected||, tiny)."""
    a = actual.data if isinstance(actual, Tensor) else np.asarray(actual, dtype=np.float64)
    e = expected.data if isinstance(expected, Tensor) else np.asarray(expected, dtype=np.float64)
    denom = max(float(np.linalg.norm(e)), 1e-12)
    return float(np.linalg.norm(a - e)) / denom
