"""Dense tensors and a tape-based reverse-mode graph.

Every differentiable op appends one node to the active :class:`Graph`.
``backward`` walks the tape in exact reverse insertion order, which makes
gradient accumulation order (and therefore the bits) reproducible.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import GraphError, NonFiniteError

_DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

_local = threading.local()


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.type in _FLOAT_DTYPES else _DEFAULT_DTYPE
    arr = np.asarray(arr, dtype=dtype)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    return arr


class Tensor:
    """A float array that may take part in a differentiation graph.

    ``data`` is float32 on the production path. float64 tensors are allowed
    so gradient checks can run the very same ops at double precision.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "graph", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.graph: Optional[Graph] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in functional) ------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __pow__(self, exponent):
        from . import functional as F
        return F.power(self, exponent)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


@dataclass
class Node:
    op: str
    inputs: tuple
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Graph:
    """Append-only tape of op nodes.

    Inputs are always recorded before the node that consumes them, so the
    insertion order is a valid topological order.
    """

    nodes: list = field(default_factory=list)
    released: bool = False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> int:
        if self.released:
            raise GraphError("cannot record into a released graph")
        self.nodes.append(Node(op, tuple(inputs), backward_fn))
        node_id = len(self.nodes) - 1
        output.node_id = node_id
        output.graph = self
        output.requires_grad = True
        return node_id

    def release(self) -> None:
        """Drop saved forward context so the memory can be reclaimed."""
        for node in self.nodes:
            node.backward_fn = None
        self.released = True

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack().pop()


def _graph_stack() -> list:
    stack = getattr(_local, "graphs", None)
    if stack is None:
        stack = _local.graphs = []
    return stack


def current_graph() -> Graph:
    """Return the graph ops currently record into, creating one if needed."""
    stack = _graph_stack()
    if stack and not stack[-1].released:
        return stack[-1]
    default = getattr(_local, "default", None)
    if default is None or default.released:
        default = _local.default = Graph()
    return default


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (used for inference and frozen models)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def make_result(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` in a Tensor and record the node when any input needs grad."""
    _check_finite(out, op)
    result = Tensor(out, dtype=out.dtype)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        current_graph().record(op, inputs, result, backward_fn)
    return result


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Propagate d(loss)/d(.) into ``.grad`` of every leaf that requires grad.

    Leaf gradients accumulate (sum) across calls, which is what gradient
    accumulation relies on. Leaves recorded in the graph but not reached
    from ``loss`` receive zero gradients.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from any graph")

    if loss.node_id is None:
        # A scalar leaf: d(loss)/d(loss) = 1.
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    graph = loss.graph
    if graph.released:
        raise GraphError("graph was already released by a previous backward")

    grads = {loss.node_id: np.ones_like(loss.data)}
    leaves = {}
    for node_id in range(loss.node_id, -1, -1):
        node = graph.nodes[node_id]
        for t in node.inputs:
            if t.requires_grad and (t.node_id is None or t.graph is not graph):
                leaves.setdefault(id(t), t)
        g = grads.pop(node_id, None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is not None and t.graph is graph:
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
            else:
                _accumulate_leaf(t, gi)

    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)

    if not retain_graph:
        graph.release()


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise GraphError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
