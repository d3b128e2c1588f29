"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a C-contiguous, read-only float64 ndarray. Values are
validated to be finite at construction; NaN or Inf anywhere is an error
state, surfaced immediately rather than propagated.

Differentiation uses an explicit ``GradTape``: while a tape is active on the
current thread, every primitive from :mod:`inhibitor.ops` whose output
requires gradients appends one record (inputs, output, backward rule) in
execution order, which is a topological order by construction. A single
``backward(loss, tape)`` sweep walks the records once in reverse and
accumulates gradients additively into ``.grad`` buffers.

Thread safety: the active-tape stack is thread-local, tensors are immutable
after construction except for their gradient buffers, and one backward sweep
owns its tape exclusively. Training code on disjoint models may therefore run
concurrently in separate threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InternalError, NonFiniteError

_tls = threading.local()


class Tensor:
    """Row-major float64 array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        _validate_finite(arr)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise InternalError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Same-shape elementwise sugar; anything fancier goes through inhibitor.ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.matmul(self, other)


def _validate_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = np.argwhere(~np.isfinite(arr))
        raise NonFiniteError(f"non-finite value at index {tuple(bad[0])} of shape {arr.shape}")


def _wrap(arr: np.ndarray, requires_grad: bool = False) -> Tensor:
    """Adopt an array we own without re-copying. Internal fast path."""
    t = Tensor.__new__(Tensor)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    _validate_finite(arr)
    arr.setflags(write=False)
    t.data = arr
    t.requires_grad = requires_grad
    t.grad = None
    t._record = None
    return t


class OpRecord:
    """One executed primitive: its operands, result, and backward rule.

    ``backward`` maps the output gradient to one gradient array (or None)
    per input, in input order.
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(
        self,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of primitives executed while the tape is active.

    Execution order is a topological order: every operand of a record is a
    leaf or the output of an earlier record. One backward sweep consumes the
    tape; calling backward twice on the same tape is an error.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise InternalError("tape stack corrupted: exiting a tape that is not on top")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list[GradTape]:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> GradTape | None:
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


def record_op(
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap an op result and record it on the active tape when it needs grads."""
    requires = any(t.requires_grad for t in inputs)
    out = _wrap(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        rec = OpRecord(inputs, out, backward)
        out._record = rec
        tape.records.append(rec)
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses of a tensor. The
    sweep visits each tape record exactly once, in reverse execution order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward; build a fresh tape")
    _check_topological(tape)
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        if len(grads) != len(rec.inputs):
            raise InternalError("backward rule returned wrong arity")
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.accumulate_grad(gi)


def _check_topological(tape: GradTape) -> None:
    tape_ids = {id(r) for r in tape.records}
    seen: set[int] = set()
    for rec in tape.records:
        for inp in rec.inputs:
            r = inp._record
            # An input produced by a record of this tape must precede its use;
            # records from other tapes are leaves as far as this tape goes.
            if r is not None and id(r) in tape_ids and id(r) not in seen:
                raise InternalError("tape records are not in topological order")
        seen.add(id(rec))


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()
