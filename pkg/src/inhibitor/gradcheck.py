"""Central-difference gradient checking and off-kink input preparation.

Central differences are invalid across the kinks of absolute values and
rectifiers, so checked inputs are prepared to keep every kink argument at
least ``margin`` away from zero; coordinates inside the margin are nudged by
``step`` until clear. With margin 1e-3 and probe step 1e-5, no probe can
cross a kink.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InternalError
from .tensor import GradTape, Tensor, backward

MARGIN = 1e-3
NUDGE = 2e-3


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensor (or tensors, positionally) to a scalar
    tensor. Error per coordinate is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    args = [x] if isinstance(x, Tensor) else list(x)
    per_arg = grad_check_multi(f, args, h)
    return max(per_arg)


def grad_check_multi(
    f: Callable[..., Tensor], args: Sequence[Tensor], h: float = 1e-5
) -> list[float]:
    """Per-argument max relative gradient error for a multi-input function."""
    live = [Tensor(a.data, requires_grad=True) for a in args]
    with GradTape() as tape:
        out = f(*live)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check: function must return a scalar tensor")
    backward(out, tape)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in live
    ]

    errors = []
    base = [a.data.copy() for a in args]
    for i in range(len(args)):
        worst = 0.0
        flat = base[i].reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + h
            f_plus = _eval_scalar(f, base)
            flat[c] = orig - h
            f_minus = _eval_scalar(f, base)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[i].reshape(-1)[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        errors.append(worst)
    return errors


def _eval_scalar(f, arrays) -> float:
    out = f(*[Tensor(a) for a in arrays])
    return out.item()


# ---------------------------------------------------------------------------
# off-kink input preparation


def _avoid(value: float, centers: np.ndarray, margin: float, step: float) -> float:
    """Walk a scalar until it is at least ``margin`` from every center."""
    for _ in range(centers.size + 8):
        near = np.abs(centers - value) < margin
        if not near.any():
            return value
        value += step
    raise InternalError("off-kink nudge failed to converge")


def offkink_pair(rng: np.random.Generator, n_q: int, n_k: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Query/key blocks whose pairwise coordinate differences avoid zero."""
    q = rng.normal(0.0, 1.0, (n_q, d))
    k = rng.normal(0.0, 1.0, (n_k, d))
    for i in range(n_q):
        for c in range(d):
            q[i, c] = _avoid(q[i, c], k[:, c], MARGIN, NUDGE)
    return q, k


def offkink_delta(z: np.ndarray, delta: float) -> float:
    """Shift ``delta`` until no centering argument sits near the rectifier kink."""
    centered = z - z.mean(axis=1, keepdims=True)
    return -_avoid(-delta, -centered.reshape(-1), MARGIN, NUDGE)


def offkink_values(
    rng: np.random.Generator, zbar: np.ndarray, n_k: int, d_v: int
) -> np.ndarray:
    """Values whose rectified halves keep a margin from the mixing thresholds."""
    v = rng.normal(0.0, 1.0, (n_k, d_v))
    for j in range(n_k):
        thresh = zbar[:, j]
        for l in range(d_v):
            x = v[j, l]
            if abs(x) < MARGIN:
                x = MARGIN + NUDGE if x >= 0 else -(MARGIN + NUDGE)
            if x > 0:
                x = _avoid(x, thresh, MARGIN, NUDGE)
            else:
                x = -_avoid(-x, thresh, MARGIN, NUDGE)
            v[j, l] = x
    return v


def offkink_inhibitor_inputs(
    rng: np.random.Generator, n_q: int, n_k: int, d: int, d_v: int
) -> dict[str, np.ndarray | float]:
    """Draw a full off-kink instance for the composed inhibitor head.

    Returns arrays Q, K, V plus scalars gamma, eta, delta such that every
    absolute-value and rectifier argument along the composed path keeps the
    safety margin (or is pinned flat, which central differences handle
    exactly).
    """
    q, k = offkink_pair(rng, n_q, n_k, d)
    gamma = 0.8 + 0.6 * rng.random()
    eta = 0.8 + 0.6 * rng.random()
    delta = float(0.3 * rng.standard_normal())

    dist = np.abs(q[:, None, :] - k[None, :, :]).sum(axis=2)
    z = gamma / math.sqrt(d) * dist
    delta = offkink_delta(z, delta)
    arg = z - z.mean(axis=1, keepdims=True) - delta
    zbar = np.maximum(arg, 0.0)
    v = offkink_values(rng, zbar, n_k, d_v)
    return {"q": q, "k": k, "v": v, "gamma": gamma, "eta": eta, "delta": delta}
