"""Dense-array autodiff core.

A Tensor wraps a contiguous row-major numpy array plus an optional gradient
buffer. Differentiable ops record a closure on the output; ``backward()``
walks the recorded graph once in reverse topological order and then releases
it, so memory for intermediate activations is reclaimed eagerly.

Precision is a process-wide switch: float64 for tests and oracles, float32
for training. Ops compute in the dtype of their inputs.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NumericalError",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "debug_checks",
    "no_grad",
    "grad_enabled",
    "make_op",
    "accumulate_grad",
]


class NumericalError(RuntimeError):
    """Raised when debug checks find a non-finite value in an op output."""


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float64
        _state.debug = False
        _state.grad_on = True
    return _state


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _st().dtype = dt.type


def default_dtype():
    return _st().dtype


def set_debug_checks(on: bool) -> None:
    """Enable per-op finiteness checks (NaN/Inf anywhere is an error)."""
    _st().debug = bool(on)


def debug_checks() -> bool:
    return _st().debug


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        st = _st()
        self._prev = st.grad_on
        st.grad_on = False
        return self

    def __exit__(self, *exc):
        _st().grad_on = self._prev
        return False


def grad_enabled() -> bool:
    return _st().grad_on


class Tensor:
    """N-d real array with optional reverse-mode gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=default_dtype())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Only defined for scalar outputs. The recorded graph is released
        afterwards; intermediate gradients are dropped, leaf gradients
        (``requires_grad=True`` nodes) are kept and accumulate across calls.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {tuple(self.shape)}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # release: drop the subgraph reference and non-leaf gradients
            node._backward = None
            node._parents = ()
            if not node.requires_grad:
                node.grad = None

    # -- operators (thin delegation; the op zoo lives in functional) ---------

    def __add__(self, other):
        from . import functional as F

        return F.add(self, _coerce(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F

        return F.add(self, F.scale(_coerce(other, self), -1.0))

    def __neg__(self):
        from . import functional as F

        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, _coerce(other, self))

    def sum(self, axis=None):
        from . import functional as F

        return F.sum(self, axis=axis)

    def mean(self, axis=None):
        from . import functional as F

        return F.mean(self, axis=axis)

    def reshape(self, *shape):
        from . import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *perm):
        from . import functional as F

        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return F.transpose(self, perm)


class Parameter(Tensor):
    """A trainable Tensor with a dotted name path, unique within a model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={tuple(self.shape)})"


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first use)."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(out_data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result in a Tensor, recording the backward closure.

    ``backward(grad_out)`` must route ``grad_out`` into the parents via
    :func:`accumulate_grad`. Recording is skipped under ``no_grad`` or when no
    parent participates in differentiation.
    """
    if debug_checks() and not np.all(np.isfinite(out_data)):
        raise NumericalError("op produced NaN/Inf")
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.flags.c_contiguous else np.ascontiguousarray(out_data)
    out.requires_grad = False
    out.grad = None
    if grad_enabled() and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
