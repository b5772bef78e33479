"""Dense tensor container and the gradient tape for reverse-mode differentiation.

All numerical kernels operate on `Tensor` and, when a `GradTape` is active,
append a record holding a hand-written backward closure. `GradTape.backward`
replays those records in exact reverse execution order and accumulates
gradients into the `.grad` slots of tensors marked `requires_grad`.
"""

from __future__ import annotations

import threading

import numpy as np

from . import config


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation's contract."""


class TapeError(RuntimeError):
    """Raised on invalid tape usage (e.g. replaying a consumed tape)."""


class Tensor:
    """N-dimensional array with shape metadata, outermost axis first.

    Data is stored contiguously in the configured storage dtype (float64 by
    default, float32 when the precision switch is set). Gradients, when
    present, are always float64.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=config.storage_dtype())
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def f64(self) -> np.ndarray:
        """The values in compute precision (no copy when already float64)."""
        return self.data.astype(np.float64, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of forward operations, replayable backward exactly once.

    Tapes are thread-local when used as context managers; independent tapes
    may record concurrently on different threads.
    """

    def __init__(self):
        self._records: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def needs_grad(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a consumed tape; call reset() first")
        self._records.append(_Node(output, inputs, backward_fn))
        self._produced.add(id(output))

    def reset(self) -> None:
        self._records.clear()
        self._produced.clear()
        self._consumed = False

    def backward(self, loss_grad=1.0) -> dict[str, np.ndarray]:
        """Replay the tape backward from its final output.

        `loss_grad` seeds the gradient of the last recorded output (a scalar
        1.0 for a scalar-rooted computation). Gradients accumulate into the
        `.grad` slot of every `requires_grad` leaf; named leaves are returned
        as a name -> gradient mapping. A tape can only be replayed once
        between resets.
        """
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before reusing it")
        if not self._records:
            raise TapeError("tape is empty, nothing to differentiate")
        self._consumed = True

        # Zero-initialized slots for every recorded parameter, so unused
        # parameters still expose a well-defined gradient.
        leaves: dict[int, Tensor] = {}
        for rec in self._records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves[id(t)] = t
        for t in leaves.values():
            if t.grad is None:
                t.grad = np.zeros(t.shape, dtype=np.float64)

        root = self._records[-1].output
        seed = np.asarray(loss_grad, dtype=np.float64)
        if seed.shape != root.shape:
            seed = np.broadcast_to(seed, root.shape).copy()
        grads: dict[int, np.ndarray] = {id(root): seed}

        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, input_grads):
                if gi is None:
                    continue
                if id(t) in self._produced:
                    acc = grads.get(id(t))
                    if acc is None:
                        grads[id(t)] = gi
                    else:
                        acc += gi
                elif t.requires_grad:
                    t.grad += gi

        return {t.name: t.grad for t in leaves.values() if t.name is not None}


def backward(tape: GradTape, loss_grad=1.0) -> dict[str, np.ndarray]:
    """Functional form of `GradTape.backward`."""
    return tape.backward(loss_grad)
