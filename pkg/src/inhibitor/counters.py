"""Exact tallies of arithmetic operations inside measured code regions.

A region is opened with ``count_ops()``; every tracked primitive executed
while the region is active adds its per-entry arithmetic cost to the region's
``OpCounters``. Regions nest, and each thread keeps its own region stack, so
concurrent measured runs never share a counter set.

The taxonomy is deliberately narrow: it covers the arithmetic of the two
attention kernels (products, additions/subtractions, absolute values,
rectifier comparisons, exponentials, divisions). Scalar parameter preparation
(for example folding a per-head scale into one constant) is a single multiply
amortised over a whole matrix and is not counted. Layer normalisation, loss
kernels, and embedding lookups fall outside the taxonomy and count nothing.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, fields

from .errors import ContractError

_tls = threading.local()
_enabled = True


@dataclass
class OpCounters:
    """Non-negative tallies, one field per tracked operation class."""

    mults: int = 0
    adds_subs: int = 0
    abs_ops: int = 0
    relu_ops: int = 0
    exps: int = 0
    divs: int = 0

    FIELDS = ("mults", "adds_subs", "abs_ops", "relu_ops", "exps", "divs")

    def snapshot(self) -> "OpCounters":
        return OpCounters(**{f.name: getattr(self, f.name) for f in fields(self)})

    def since(self, earlier: "OpCounters") -> "OpCounters":
        """Exact difference against an earlier snapshot of the same region."""
        return OpCounters(
            **{f.name: getattr(self, f.name) - getattr(earlier, f.name) for f in fields(self)}
        )

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def total(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))


def _stack() -> list[OpCounters]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def instrumentation_enabled() -> bool:
    return _enabled


def set_instrumentation(enabled: bool) -> None:
    """Globally enable or disable the opening of measured regions."""
    global _enabled
    _enabled = bool(enabled)


@contextmanager
def count_ops(counters: OpCounters | None = None):
    """Open a measured region on the calling thread.

    Raises ContractError when instrumentation has been disabled globally.
    """
    if not _enabled:
        raise ContractError("instrumentation is disabled; call set_instrumentation(True) first")
    c = counters if counters is not None else OpCounters()
    stack = _stack()
    stack.append(c)
    try:
        yield c
    finally:
        stack.pop()


def bump(
    mults: int = 0,
    adds_subs: int = 0,
    abs_ops: int = 0,
    relu_ops: int = 0,
    exps: int = 0,
    divs: int = 0,
) -> None:
    """Add costs to every region active on this thread. No-op outside regions."""
    stack = getattr(_tls, "stack", None)
    if not stack:
        return
    for c in stack:
        c.mults += mults
        c.adds_subs += adds_subs
        c.abs_ops += abs_ops
        c.relu_ops += relu_ops
        c.exps += exps
        c.divs += divs
