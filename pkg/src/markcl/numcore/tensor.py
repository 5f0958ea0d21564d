"""Tensor type and reverse-mode graph traversal.

Values are stored as float32 by default. Every op computes in float64 and
casts its result back to the storage dtype, so reductions accumulate in
64 bits. ``float64_mode`` switches the storage dtype, which is what the
gradient checker uses to get finite differences that mean something.
"""
import contextlib
import threading
from typing import Optional

import numpy as np

from ..errors import ContractError, NonFiniteError

_state = threading.local()


def storage_dtype():
    return getattr(_state, "dtype", np.float32)


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def float64_mode():
    prev = storage_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is a contiguous numpy array in the storage dtype. ``grad`` is
    populated by :func:`backward` for tensors with ``requires_grad`` and keeps
    accumulating until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad=False, name=None, _ctx=None):
        arr = np.asarray(data)
        if arr.dtype != storage_dtype() or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=storage_dtype())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def copy(self, requires_grad=None):
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for small expressions and tests
    def __add__(self, other):
        from .ops import add
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def sum(self):
        from .ops import tensor_sum
        return tensor_sum(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.full((), x))


class Function:
    """One recorded node of the graph.

    Subclasses implement ``forward`` on float64 arrays and ``backward``,
    which maps the output gradient to one gradient (or None) per input.
    """

    def __init__(self, *parents):
        self.parents = parents

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors, **kwargs):
        fn = cls(*tensors)
        out = fn.forward(*(np.asarray(t.data, dtype=np.float64) for t in tensors), **kwargs)
        with np.errstate(over="ignore"):
            result = Tensor(out)
        if not np.all(np.isfinite(result.data)):
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        if grad_enabled() and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result._ctx = fn
        else:
            fn.parents = ()
        return result


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced by a recorded graph")
    grads = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            g = g.astype(node.data.dtype)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._ctx.parents, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
