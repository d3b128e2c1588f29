"""Differentiable primitives over :class:`~inhibitor.tensor.Tensor`.

Every function validates operand shapes explicitly (there is no implicit
broadcasting beyond boolean-mask expansion), computes the forward value with
numpy, registers a backward rule on the active tape, and adds its arithmetic
cost to any open counter region.

Counting conventions, shared with the closed-form cost model:

===================  ========================================================
matmul [m,k]@[k,n]   m*n*k mults, m*n*(k-1) adds
add/sub/mul          one add/sub/mult per entry
scale*/mul_mask      one mult per entry (scalar preparation is not counted)
shift_param/add_rowvec  one add per entry
halfrect             one rectifier comparison per entry
abs_diff_sum         m*n*d subs, m*n*d abs, m*n*(d-1) adds
reduce_mean_axis     (contributing - outputs) adds, one div per output
softmax_rows         per row of c unmasked entries: (c-1) max comparisons
                     (counted as rectifier ops), c subs, c exps, (c-1) adds,
                     c divs
threshold_mix        per (query,key,feature): 1 sub, 1 add, 2 rectifiers,
                     1 add to join the two halves; (n_k-1) adds per output
                     entry for the key sum; drop-mask multiplies counted only
                     when a mask is given
sum_all/mean_all     (contributing - 1) adds; mean adds one div
===================  ========================================================

Layer normalisation, tanh, embedding lookups, and the fused loss kernels are
outside the cost taxonomy and count nothing; data movement (transpose,
reshape-free expansion, concatenation, slicing, masking sentinels) is free.
"""

from __future__ import annotations

import numpy as np

from . import counters
from .errors import (
    ContractError,
    DegenerateReductionError,
    InputError,
    ShapeError,
)
from .tensor import Tensor, record_op

POSITIVE = "positive"
NEGATIVE = "negative"


def _as2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op}: expected a rank-2 tensor, got shape {t.shape}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")


def _bool_mask(mask: np.ndarray, shape: tuple[int, ...], op: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise ContractError(f"{op}: mask must be boolean, got dtype {m.dtype}")
    if m.shape != shape:
        try:
            m = np.broadcast_to(m, shape)
        except ValueError:
            raise ShapeError(f"{op}: mask shape {m.shape} does not expand to {shape}") from None
    return m


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    counters.bump(adds_subs=a.size)
    return record_op([a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    counters.bump(adds_subs=a.size)
    return record_op([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    counters.bump(mults=a.size)
    ad, bd = a.data, b.data
    return record_op([a, b], ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply every entry by a plain constant."""
    f = float(factor)
    counters.bump(mults=x.size)
    return record_op([x], x.data * f, lambda g: (g * f,))


def scale_param(x: Tensor, s: Tensor, const: float = 1.0) -> Tensor:
    """Multiply every entry by ``s * const`` where ``s`` is a learnable scalar.

    The scalar fold ``s * const`` is prepared once and is not counted; only
    the per-entry multiplies are.
    """
    if s.size != 1:
        raise ShapeError(f"scale_param: scalar expected, got shape {s.shape}")
    f = float(s.data.reshape(-1)[0]) * float(const)
    counters.bump(mults=x.size)
    xd = x.data

    def bwd(g):
        ds = np.asarray(np.sum(g * xd) * const, dtype=np.float64).reshape(s.shape)
        return g * f, ds

    return record_op([x, s], xd * f, bwd)


def shift_param(x: Tensor, s: Tensor, coeff: float = 1.0) -> Tensor:
    """Add ``coeff * s`` (a learnable scalar) to every entry."""
    if s.size != 1:
        raise ShapeError(f"shift_param: scalar expected, got shape {s.shape}")
    c = float(coeff)
    off = float(s.data.reshape(-1)[0]) * c
    counters.bump(adds_subs=x.size)

    def bwd(g):
        ds = np.asarray(np.sum(g) * c, dtype=np.float64).reshape(s.shape)
        return g, ds

    return record_op([x, s], x.data + off, bwd)


def mul_mask(x: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks, fixed weights)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.shape != x.shape:
        raise ShapeError(f"mul_mask: array shape {a.shape} != tensor shape {x.shape}")
    counters.bump(mults=x.size)
    return record_op([x], x.data * a, lambda g: (g * a,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _as2d(a, "matmul")
    _as2d(b, "matmul")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} vs {b.shape}")
    counters.bump(mults=m * n * k, adds_subs=m * n * (k - 1))
    ad, bd = a.data, b.data
    return record_op([a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    _as2d(x, "transpose")
    return record_op([x], x.data.T.copy(), lambda g: (g.T,))


def expand_col(v: Tensor, n: int) -> Tensor:
    """Repeat a length-m vector across n columns: out[i, j] = v[i]."""
    if v.data.ndim != 1:
        raise ShapeError(f"expand_col: expected rank-1, got shape {v.shape}")
    out = np.repeat(v.data[:, None], n, axis=1)
    return record_op([v], out, lambda g: (g.sum(axis=1),))


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias to every row of an [m, n] tensor."""
    _as2d(x, "add_rowvec")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_rowvec: bias shape {b.shape} does not fit rows of {x.shape}")
    counters.bump(adds_subs=x.size)
    return record_op([x, b], x.data + b.data[None, :], lambda g: (g, g.sum(axis=0)))


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows: empty input list")
    width = parts[0].shape[1:] if parts[0].data.ndim > 1 else ()
    for p in parts:
        if p.shape[1:] != width:
            raise ShapeError(f"concat_rows: trailing shapes differ: {p.shape[1:]} vs {width}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=0)
    return record_op(parts, out, lambda g: tuple(np.split(g, offsets, axis=0)))


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols: empty input list")
    rows = parts[0].shape[0]
    for p in parts:
        _as2d(p, "concat_cols")
        if p.shape[0] != rows:
            raise ShapeError(f"concat_cols: row extents differ: {p.shape[0]} vs {rows}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)
    return record_op(parts, out, lambda g: tuple(np.split(g, offsets, axis=1)))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[0]):
        raise ContractError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")
    shape = x.shape

    def bwd(g):
        dx = np.zeros(shape, dtype=np.float64)
        dx[start:stop] = g
        return (dx,)

    return record_op([x], x.data[start:stop].copy(), bwd)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    _as2d(table, "embed")
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"embed: ids must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InputError(
            f"embed: id out of range [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    tshape = table.shape

    def bwd(g):
        dt = np.zeros(tshape, dtype=np.float64)
        np.add.at(dt, idx, g)
        return (dt,)

    return record_op([table], table.data[idx], bwd)


# ---------------------------------------------------------------------------
# rectifiers and distance kernels


def halfrect(x: Tensor, sign: str) -> Tensor:
    """Positive half ``max(x, 0)`` or negative half ``min(x, 0)``.

    The two halves always reconstruct the input exactly: pos(x) + neg(x) == x.
    Gradient passes only where the input is strictly on the active side
    (subgradient 0 at exactly 0).
    """
    counters.bump(relu_ops=x.size)
    xd = x.data
    if sign == POSITIVE:
        return record_op([x], np.maximum(xd, 0.0), lambda g: (g * (xd > 0),))
    if sign == NEGATIVE:
        return record_op([x], np.minimum(xd, 0.0), lambda g: (g * (xd < 0),))
    raise ContractError(f"halfrect: sign must be '{POSITIVE}' or '{NEGATIVE}', got {sign!r}")


def relu(x: Tensor) -> Tensor:
    return halfrect(x, POSITIVE)


def abs_diff_sum(q: Tensor, k: Tensor) -> Tensor:
    """Unscaled pairwise Manhattan distances between rows of q and rows of k.

    out[i, j] = sum_d |q[i, d] - k[j, d]|. The derivative of |.| is taken as
    0 at exactly 0.
    """
    _as2d(q, "abs_diff_sum")
    _as2d(k, "abs_diff_sum")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"abs_diff_sum: trailing extents differ: {q.shape} vs {k.shape}")
    m, d = q.shape
    n = k.shape[0]
    counters.bump(adds_subs=m * n * d + m * n * (d - 1), abs_ops=m * n * d)
    diff = q.data[:, None, :] - k.data[None, :, :]
    out = np.abs(diff).sum(axis=2)

    def bwd(g):
        s = np.sign(diff) * g[:, :, None]
        return s.sum(axis=1), -s.sum(axis=0)

    return record_op([q, k], out, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_mean_axis(x: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Arithmetic mean over one axis, restricted to unmasked entries.

    Gradient is distributed uniformly over the entries that contributed.
    """
    if not (0 <= axis < x.data.ndim):
        raise ContractError(f"reduce_mean_axis: axis {axis} out of range for shape {x.shape}")
    if mask is None:
        n = x.shape[axis]
        out_size = x.size // n if n else 0
        counters.bump(adds_subs=out_size * (n - 1), divs=out_size)
        shape = x.shape

        def bwd(g):
            return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis).reshape(shape),)

        return record_op([x], x.data.mean(axis=axis), bwd)

    m = _bool_mask(mask, x.shape, "reduce_mean_axis")
    cnt = m.sum(axis=axis)
    if (cnt == 0).any():
        raise DegenerateReductionError(
            f"reduce_mean_axis: a slice along axis {axis} has no unmasked entries"
        )
    counters.bump(adds_subs=int(m.sum()) - cnt.size, divs=cnt.size)
    out = np.where(m, x.data, 0.0).sum(axis=axis) / cnt

    def bwd_masked(g):
        ge = np.expand_dims(g / cnt, axis)
        return (np.where(m, ge, 0.0),)

    return record_op([x], out, bwd_masked)


def sum_all(x: Tensor) -> Tensor:
    counters.bump(adds_subs=max(x.size - 1, 0))
    shape = x.shape
    return record_op([x], np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over all entries, or over unmasked entries when a mask is given."""
    if mask is None:
        if x.size == 0:
            raise DegenerateReductionError("mean_all: empty tensor")
        counters.bump(adds_subs=x.size - 1, divs=1)
        n = x.size
        shape = x.shape
        return record_op(
            [x], np.asarray(x.data.mean()), lambda g: (np.full(shape, float(g) / n),)
        )
    m = _bool_mask(mask, x.shape, "mean_all")
    n = int(m.sum())
    if n == 0:
        raise DegenerateReductionError("mean_all: mask excludes every entry")
    counters.bump(adds_subs=n - 1, divs=1)
    out = np.asarray(np.where(m, x.data, 0.0).sum() / n)
    return record_op([x], out, lambda g: (np.where(m, float(g) / n, 0.0),))


# ---------------------------------------------------------------------------
# row-wise softmax


def softmax_rows(s: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax with row-max stabilisation.

    Masked entries are treated as minus infinity and come out exactly 0; a
    fully masked row is a degenerate reduction.
    """
    _as2d(s, "softmax_rows")
    nq, nk = s.shape
    if mask is not None:
        m = _bool_mask(mask, s.shape, "softmax_rows")
        cnt = m.sum(axis=1)
        if (cnt == 0).any():
            raise DegenerateReductionError("softmax_rows: a row is fully masked")
        work = np.where(m, s.data, -np.inf)
        counters.bump(
            relu_ops=int((cnt - 1).sum()),
            adds_subs=int(cnt.sum()) + int((cnt - 1).sum()),
            exps=int(cnt.sum()),
            divs=int(cnt.sum()),
        )
    else:
        work = s.data
        counters.bump(
            relu_ops=nq * (nk - 1),
            adds_subs=nq * nk + nq * (nk - 1),
            exps=nq * nk,
            divs=nq * nk,
        )
    rowmax = work.max(axis=1, keepdims=True)
    e = np.exp(work - rowmax)
    if mask is not None:
        e = np.where(m, e, 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return record_op([s], y, bwd)


# ---------------------------------------------------------------------------
# gated value mixing


def threshold_mix(
    zbar: Tensor, vplus: Tensor, vminus: Tensor, drop: np.ndarray | None = None
) -> Tensor:
    """Sum rectified value halves gated by a nonnegative threshold matrix.

    out[i, l] = sum_j ( max(vplus[j, l] - zbar[i, j], 0)
                      + min(vminus[j, l] + zbar[i, j], 0) )

    An optional drop array [n_q, n_k] (zero or inverse-keep-rate entries)
    multiplies each key's contribution before the sum over keys.
    """
    _as2d(zbar, "threshold_mix")
    _as2d(vplus, "threshold_mix")
    _same_shape(vplus, vminus, "threshold_mix")
    nq, nk = zbar.shape
    if vplus.shape[0] != nk:
        raise ShapeError(
            f"threshold_mix: key extents differ: scores {zbar.shape} vs values {vplus.shape}"
        )
    dv = vplus.shape[1]
    counters.bump(
        adds_subs=3 * nq * nk * dv + nq * dv * (nk - 1),
        relu_ops=2 * nq * nk * dv,
        mults=(nq * nk * dv if drop is not None else 0),
    )
    zb = zbar.data[:, :, None]
    a1 = vplus.data[None, :, :] - zb
    a2 = vminus.data[None, :, :] + zb
    contrib = np.maximum(a1, 0.0) + np.minimum(a2, 0.0)
    if drop is not None:
        d = np.asarray(drop, dtype=np.float64)
        if d.shape != (nq, nk):
            raise ShapeError(f"threshold_mix: drop shape {d.shape} != scores shape {(nq, nk)}")
        contrib = contrib * d[:, :, None]
    out = contrib.sum(axis=1)

    def bwd(g):
        ge = g[:, None, :]
        if drop is not None:
            ge = ge * np.asarray(drop, dtype=np.float64)[:, :, None]
        m1 = a1 > 0
        m2 = a2 < 0
        dvp = (m1 * ge).sum(axis=0)
        dvm = (m2 * ge).sum(axis=0)
        dz = ((m2.astype(np.float64) - m1) * ge).sum(axis=2)
        return dz, dvp, dvm

    return record_op([zbar, vplus, vminus], out, bwd)


def where_mask(x: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    """Keep unmasked entries, overwrite masked ones with a constant."""
    m = _bool_mask(mask, x.shape, "where_mask")
    return record_op([x], np.where(m, x.data, float(fill)), lambda g: (np.where(m, g, 0.0),))


# ---------------------------------------------------------------------------
# normalisation and pointwise nonlinearities outside the cost taxonomy


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise each row to mean 0, variance 1, then apply an affine map."""
    _as2d(x, "layer_norm")
    d = x.shape[1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gain.shape}/{offset.shape} do not fit rows of {x.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data[None, :] + offset.data[None, :]
    gd = gain.data

    def bwd(g):
        dxhat = g * gd[None, :]
        # Standard row-wise layer-norm backward.
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record_op([x, gain, offset], out, bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record_op([x], y, lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# fused loss kernels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    _as2d(logits, "cross_entropy")
    b, c = logits.shape
    y = np.asarray(labels)
    if y.shape != (b,) or not np.issubdtype(y.dtype, np.integer):
        raise ContractError(f"cross_entropy: labels must be {b} integers, got {y.shape} {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InputError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = np.asarray((lse - z[np.arange(b), y]).mean())
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=1, keepdims=True)

    def bwd(g):
        d = probs.copy()
        d[np.arange(b), y] -= 1.0
        return (d * (float(g) / b),)

    return record_op([logits], loss, bwd)


def soft_kl(teacher_logits: Tensor, student_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL from teacher to student, scaled by T^2.

    loss = T^2 * mean_over_rows KL(softmax(t/T) || softmax(s/T)). The teacher
    side is a constant: no gradient flows to it.
    """
    if temperature <= 0:
        raise ContractError(f"soft_kl: temperature must be positive, got {temperature}")
    _same_shape(teacher_logits, student_logits, "soft_kl")
    _as2d(teacher_logits, "soft_kl")
    t = float(temperature)
    b = teacher_logits.shape[0]

    def logsoftmax(z):
        zm = z.max(axis=1, keepdims=True)
        return z - zm - np.log(np.exp(z - zm).sum(axis=1, keepdims=True))

    lt = logsoftmax(teacher_logits.data / t)
    ls = logsoftmax(student_logits.data / t)
    pt = np.exp(lt)
    ps = np.exp(ls)
    loss = np.asarray(t * t * (pt * (lt - ls)).sum(axis=1).mean())

    def bwd(g):
        return None, (ps - pt) * (float(g) * t / b)

    return record_op([teacher_logits, student_logits], loss, bwd)
