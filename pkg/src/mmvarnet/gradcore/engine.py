"""Tape-based reverse-mode differentiation.

Primitives record a :class:`Node` on the innermost active :class:`Tape`
whenever one of their inputs requires a gradient.  Vector-Jacobian products
are themselves written with primitives, so running :func:`grad` with
``create_graph=True`` inside a tape yields gradients that can be
differentiated again (needed to train through unrolled gradient steps).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import StructuralError

_counter = itertools.count()
_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "tapes", None)
    if st is None:
        st = _local.tapes = []
    return st


def _active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st and st[-1] is not None else None


class Node:
    __slots__ = ("inputs", "vjp", "index", "op")

    def __init__(self, inputs, vjp, op):
        self.inputs = inputs
        self.vjp = vjp
        self.op = op
        self.index = next(_counter)


class Tensor:
    """Dense float64 array with an optional link to the node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise StructuralError(f"tensors have at most 4 extents, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, like=self), self)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        other = as_tensor(other)
        if other.shape == () and self.shape != ():
            return ops.smul(other, self)
        if self.shape == () and other.shape != ():
            return ops.smul(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if like is not None and arr.shape == () and like.shape != ():
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes shadow outer ones.  Each thread
    has its own stack, so separate tapes may run concurrently.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def no_record():
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


def is_recording() -> bool:
    return _active_tape() is not None


def record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap a primitive result, attaching a node when gradients may flow."""
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        node = Node(tuple(inputs), vjp, op)
        tape.nodes.append(node)
        out.node = node
        out.requires_grad = True
    return out


def _topo(output: Tensor, stop: set[int] = frozenset()) -> list[Tensor]:
    # tensors in ``stop`` are treated as leaves: nothing upstream is visited
    seen = set()
    order = []
    stack = [output]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None and id(t) not in stop:
            order.append(t)
            stack.extend(t.node.inputs)
    order.sort(key=lambda t: t.node.index, reverse=True)
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False,
         seed: Tensor | None = None) -> list[Tensor]:
    """Gradients of scalar ``output`` w.r.t. ``inputs``.

    Inputs the output does not depend on get zero gradients.  With
    ``create_graph`` the returned tensors are themselves recorded on the
    active tape.
    """
    from . import ops

    inputs = list(inputs)
    if seed is None:
        if output.shape != ():
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.array(1.0))
    elif seed.shape != output.shape:
        raise StructuralError("seed shape must match output shape")

    grads: dict[int, Tensor] = {id(output): seed}
    wanted = {id(x) for x in inputs}
    ctx = _nullctx() if create_graph else no_record()
    with ctx:
        for t in _topo(output, wanted):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            needs = tuple(i.requires_grad for i in node.inputs)
            in_grads = node.vjp(g, needs)
            for inp, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else ops.add(prev, gi)
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros(x.shape)))
    return out


@contextmanager
def _nullctx():
    yield


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every requires-grad leaf referenced by ``tape``.

    Returns ``{id(leaf): grad}``.  Leaves with no path to ``output`` get zeros.
    """
    if output.shape != ():
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    leaves = []
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None and id(t) not in seen:
                seen.add(id(t))
                leaves.append(t)
    gs = grad(output, leaves)
    result = {}
    for leaf, g in zip(leaves, gs):
        leaf.grad = g.data
        result[id(leaf)] = g.data
    return result
