"""Dense tensors and the gradient tape that records operations on them."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """N-dimensional float array that can take part in reverse-mode differentiation.

    ``data`` is always a numpy array with every extent >= 1. ``grad`` is filled
    in by :meth:`GradientTape.backward` for leaves with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def dump(self) -> str:
        """Plain-text debug form: ``shape; row-major values``."""
        shape = "x".join(str(n) for n in self.shape)
        values = " ".join(repr(float(v)) for v in self.data.reshape(-1))
        return f"{shape}; {values}"

    # Operator sugar; the implementations live in ``ops``.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Ordered record of primitive applications.

    Operations executed inside ``with tape:`` whose inputs require gradients
    are appended in execution order, so the list is topologically sorted.
    A tape supports a single :meth:`backward`; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("gradient tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        outputs = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and id(t) not in outputs:
                    leaves[id(t)] = t
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        if loss.requires_grad and id(loss) not in outputs:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = g.astype(leaf.data.dtype, copy=False) if g is not None else np.zeros_like(leaf.data)
        self._consumed = True


def _stack() -> list[GradientTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[GradientTape]:
    stack = _stack()
    return stack[-1] if stack else None


def make_result(data: np.ndarray, inputs: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as an op output and record it on the active tape if needed."""
    inputs = tuple(inputs)
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out = Tensor._wrap(data, tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: GradientTape) -> None:
    tape.backward(loss)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(x, dtype=dtype)
