"""Dense tensor value type with reverse-mode gradient recording.

A ``Tensor`` wraps a row-major numpy buffer. When recording is enabled and any
input requires a gradient, ops attach a backward closure and their parents, and
:func:`backward` / :func:`grad` walk that graph in reverse topological order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
_PRECISIONS = {"float64": np.float64, "float32": np.float32}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ValueError):
    """Non-finite input where finite values are required."""


class GradientError(RuntimeError):
    """Gradient requested for a value that was not recorded."""


def resolve_dtype(precision: str | np.dtype | type | None) -> np.dtype:
    if precision is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(precision, str):
        try:
            return np.dtype(_PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_PRECISIONS)}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def precision_name(dtype: np.dtype) -> str:
    return np.dtype(dtype).name


class _State(threading.local):
    def __init__(self) -> None:
        self.recording = True
        self.counter: OpCounter | None = None


_state = _State()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def is_recording() -> bool:
    return _state.recording


@dataclass
class OpCounter:
    """Tally of op invocations and approximate multiply-add work."""

    calls: dict[str, int] = field(default_factory=dict)
    flops: int = 0

    def add(self, name: str, flops: int = 0) -> None:
        self.calls[name] = self.calls.get(name, 0) + 1
        self.flops += int(flops)

    def __getitem__(self, name: str) -> int:
        return self.calls.get(name, 0)


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    prev = _state.counter
    counter = OpCounter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _tally(name: str, flops: int = 0) -> None:
    c = _state.counter
    if c is not None:
        c.add(name, flops)


class Tensor:
    """Immutable dense array; ``data`` is a numpy array in row-major order."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_lift(other, self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    """Wrap an op result, recording the graph edge when needed."""
    out = Tensor(data)
    if _state.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(output: Tensor, seed: np.ndarray | None) -> dict[int, np.ndarray]:
    if not output.requires_grad:
        raise GradientError("output was not produced by a recorded computation")
    if seed is None:
        if output.size != 1:
            raise GradientError(f"seed gradient required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise DimensionError(f"seed shape {seed.shape} does not match output shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(_toposort(output)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(f"{node.op}: gradient shape {pg.shape} != input shape {parent.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(output: Tensor, inputs: Iterable[Tensor], seed: np.ndarray | None = None,
         allow_unused: bool = False) -> list[np.ndarray]:
    """Gradients of ``output`` (contracted with ``seed``) w.r.t. each input.

    Raises GradientError if an input is not part of the recorded graph, unless
    ``allow_unused`` is set, in which case its gradient is zero.
    """
    inputs = list(inputs)
    grads = _propagate(output, seed)
    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None and allow_unused:
            g = np.zeros_like(x.data)
        elif g is None:
            raise GradientError(f"{x!r} is not part of the recorded graph of this output")
        result.append(g)
    return result


def backward(output: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients into ``.grad`` of every leaf that requires one."""
    grads = _propagate(output, seed)
    for node in _toposort(output):
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                node.grad = g if node.grad is None else node.grad + g
