"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. When gradient recording is enabled and any operand
requires a gradient, each :class:`Function` application attaches a :class:`Node` to its output
holding the operation, its parents and the cached forward value. Backward rules are written in
terms of other differentiable operations, so gradients can themselves be differentiated.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


class _GradState(threading.local):
    def __init__(self) -> None:
        self.enabled = True
        self.graphs: list["Graph"] = []


_state = _GradState()
_sequence = itertools.count()


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def set_grad_enabled(flag: bool) -> Iterator[None]:
    previous = _state.enabled
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context manager that stops graph recording in the current thread."""
    return set_grad_enabled(False)


@dataclass(eq=False)
class Node:
    """One recorded operation: parents precede children by construction."""

    seq: int
    fn: "Function"
    parents: tuple["Tensor", ...]
    value: np.ndarray

    @property
    def tag(self) -> str:
        return self.fn.tag


class Graph:
    """Append-only record of the nodes created while the context is active.

    Recording is optional; gradients are computed from the node references carried by tensors.
    A recorded graph can be replayed from its leaves to check that every cached value is
    reproduced bit for bit.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _state.graphs.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _state.graphs.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node's forward value from leaf data, in recording order."""
        values = {}
        for node in self.nodes:
            args = []
            for parent in node.parents:
                if parent.node is not None and id(parent.node) in values:
                    args.append(values[id(parent.node)])
                else:
                    args.append(parent.data)
            values[id(node)] = node.fn.forward(*args)
        return [values[id(node)] for node in self.nodes]

    def verify_replay(self) -> bool:
        replayed = self.replay()
        return all(
            value.shape == node.value.shape and np.array_equal(value, node.value, equal_nan=True)
            for value, node in zip(replayed, self.nodes)
        )


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward`` on numpy arrays and ``backward`` on tensors. ``backward``
    receives the upstream gradient and the parent tensors and returns one gradient (or None)
    per parent, each with the parent's shape.
    """

    tag = "op"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: "Tensor", *inputs: "Tensor") -> Sequence[Optional["Tensor"]]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    def __call__(self, *inputs: "Tensor") -> "Tensor":
        inputs = tuple(as_tensor(t) for t in inputs)
        value = self.forward(*(t.data for t in inputs))
        out = Tensor(value)
        if _state.enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(seq=next(_sequence), fn=self, parents=inputs, value=out.data)
            for graph in _state.graphs:
                graph.record(out.node)
        return out


class Tensor:
    """Dense real array, optionally participating in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node: Optional[Node] = None

    # -- introspection -------------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if not self.is_leaf:
            raise ValueError("requires_grad_ is only valid on leaf tensors")
        self.requires_grad = flag
        return self

    # -- arithmetic ----------------------------------------------------------------------------

    def __add__(self, other: Any) -> "Tensor":
        return _ops.add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return _ops.add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return _ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return _ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            return _ops.scale(self, float(other))
        return _ops.mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            return _ops.scale(self, float(other))
        return _ops.mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        if _is_scalar(other):
            if float(other) == 0.0:
                raise ZeroDivisionError("division of a tensor by scalar zero")
            return _ops.scale(self, 1.0 / float(other))
        return _ops.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return _ops.div(other, self)

    def __neg__(self) -> "Tensor":
        return _ops.neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return _ops.power(self, exponent)

    def __matmul__(self, other: Any) -> "Tensor":
        return _ops.matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return _ops.index(self, key)

    # -- shape and reductions ------------------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        return _ops.transpose(self)

    def transpose(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return _ops.transpose(self, axes)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        return _ops.mean(self, axis=axis, keepdims=keepdims)


def _is_scalar(value: Any) -> bool:
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, bool)


def as_tensor(value: Union["Tensor", np.ndarray, float, Sequence]) -> Tensor:
    """Wrap a constant; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


from . import ops as _ops  # noqa: E402
