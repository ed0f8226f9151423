"""Dense float64 arrays with a recording tape for reverse-mode differentiation."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


class TapeMutationError(RuntimeError):
    """Raised when a tape is replayed after one of its nodes was mutated."""


class Tensor:
    """A dense multi-dimensional float64 array, optionally tracked on a tape.

    Data is owned but treated as read-only once the tensor participates in a
    recorded operation; in-place updates must go through ``assign_`` so the
    version counter can invalidate stale tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_version")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._version = 0

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def assign_(self, new_data) -> None:
        """Replace the stored values in place, invalidating recorded tapes."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_: expected shape {self.data.shape}, got {arr.shape}")
        self.data = arr
        self._version += 1

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; implementations live in ops.py and are bound at import
    def __add__(self, other):
        return _OPS["add"](self, other)

    def __sub__(self, other):
        return _OPS["sub"](self, other)

    def __mul__(self, other):
        return _OPS["multiply"](self, other)

    def __matmul__(self, other):
        return _OPS["matmul"](self, other)

    def __neg__(self):
        return _OPS["negate"](self)

    def reshape(self, shape):
        return _OPS["reshape"](self, shape)

    def transpose(self, axes):
        return _OPS["transpose"](self, axes)

    def sum(self, axis=None, keepdims=False):
        return _OPS["sum"](self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _OPS["mean"](self, axis=axis, keepdims=keepdims)


# Populated by ops.py at import time so Tensor sugar can dispatch without
# circular imports.
_OPS: dict = {}


class Parameter(Tensor):
    """A trainable tensor with optimizer state (first/second moments, step)."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0


class _Record:
    __slots__ = ("op", "inputs", "output", "backward", "versions")

    def __init__(self, op, inputs, output, backward, versions):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.versions = versions


_TAPE_STACK: list = []


class Tape:
    """Ordered record of primitive applications.

    Creation order is a topological order of the computation DAG, so the
    backward pass is a single reverse sweep; every node is visited once.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable) -> None:
        versions = tuple(t._version for t in inputs) + (output._version,)
        self.records.append(_Record(op, tuple(inputs), output, backward, versions))

    def backward(self, output: Tensor, seed=None) -> dict:
        """Accumulate gradients of ``output`` (seeded) into every leaf.

        Returns a dict mapping each requires_grad leaf tensor to its gradient;
        the same arrays are also accumulated into ``tensor.grad``.
        """
        if seed is None:
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ShapeError(
                    f"backward: seed shape {seed.shape} != output shape {output.data.shape}")

        produced = {id(rec.output) for rec in self.records}
        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        tensors: dict[int, Tensor] = {id(output): output}

        for rec in reversed(self.records):
            current = tuple(t._version for t in rec.inputs) + (rec.output._version,)
            if current != rec.versions:
                raise TapeMutationError(
                    f"tape node '{rec.op}' was mutated after recording; replay rejected")
            g = grads.get(id(rec.output))
            if g is None:
                continue
            input_grads = rec.backward(g)
            for t, ig in zip(rec.inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                tensors[key] = t

        leaf_grads: dict[Tensor, np.ndarray] = {}
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad and key not in produced:
                t.accumulate_grad(g)
                leaf_grads[t] = g
        return leaf_grads


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
