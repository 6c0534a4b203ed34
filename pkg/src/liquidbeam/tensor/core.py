"""Dense tensors recorded on a reverse-mode tape.

Every differentiable op appends a node to the active :class:`Graph`.  Calling
:func:`backward` on a scalar walks the tape in reverse, fills ``.grad`` on every
``requires_grad`` leaf and then clears the tape.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_dtype = np.float32
_debug = False
_grad_enabled = True


def default_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype: str | type = "float64") -> Iterator[None]:
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    global _debug
    prev = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    generation: int


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    generation: int = 0
    _next_id: int = 0

    def record(self, op: str, inputs: tuple["Tensor", ...], backward_fn) -> Node:
        node = Node(self._next_id, op, inputs, backward_fn, self.generation)
        self._next_id += 1
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


_graph = Graph()


def current_graph() -> Graph:
    return _graph


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # arithmetic sugar, all routed through ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.rsub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self):
        from . import ops
        return ops.sum_all(self)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op's output and put it on the tape when any input is tracked."""
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(t.tracked for t in inputs):
        out.node = _graph.record(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise GraphStateError("loss is not connected to any recorded graph")
    if node.generation != _graph.generation:
        raise GraphStateError("graph for this loss was already consumed by backward()")

    grads: dict[int, np.ndarray] = {node.id: np.ones_like(loss.data)}
    for n in reversed(_graph.nodes):
        if n.id > node.id:
            continue
        g = grads.pop(n.id, None)
        if g is None:
            continue
        in_grads = n.backward_fn(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None:
                continue
            if t.node is not None and t.node.generation == n.generation:
                prev = grads.get(t.node.id)
                grads[t.node.id] = gi if prev is None else prev + gi
            elif t.requires_grad:
                gi = gi.astype(t.data.dtype, copy=False)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    _graph.clear()


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
