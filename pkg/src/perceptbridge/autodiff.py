"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every trainable block in this package is built from the ops here. Ops
compute eagerly on numpy arrays and, while a Tape is active and some
input requires a gradient, record a vector-Jacobian closure. The
closures run over raw numpy arrays (no higher-order autodiff), in
reverse execution order, which is always a valid topological order.

Conventions: row-major layout, broadcasting only over leading batch
dimensions (plus numpy-style elementwise broadcasting for add/mul),
float32 for training and float64 for gradient-check suites.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Variable",
    "Tape",
    "ShapeError",
    "NumericsError",
    "MacCounter",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "gelu",
    "matmul",
    "linear",
    "softmax",
    "rms_norm",
    "layer_norm",
    "dropout",
    "smoothed_cross_entropy",
    "concat",
    "narrow",
    "index_select",
    "embedding",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NumericsError(FloatingPointError):
    """Raised by the finite-activation validation mode on NaN/Inf."""


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_active_tape: "Tape | None" = None
_check_finite = False
_mac_counter: "MacCounter | None" = None


def set_check_finite(enabled: bool) -> None:
    """Toggle the validation mode that asserts every op output is finite."""
    global _check_finite
    _check_finite = bool(enabled)


class MacCounter:
    """Counts multiply-adds of every matmul/linear executed while active.

    Used as the instrumented oracle against the closed-form cost model.
    """

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)

    def __enter__(self):
        global _mac_counter
        self._prev = _mac_counter
        _mac_counter = self
        return self

    def __exit__(self, *exc):
        global _mac_counter
        _mac_counter = self._prev
        return False


class Tensor:
    """A dense array value, optionally carrying a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Variable(Tensor):
    """A named leaf tensor; `trainable` gates optimizer updates and taping."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str | None = None, trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = self.trainable

    def __repr__(self):
        return f"Variable({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of executed ops, replayed in reverse by `backward`."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every tensor `loss` depends on.

        Visits each recorded node exactly once, in reverse execution
        order; tensors not on a path to `loss` are left untouched.
        """
        if loss.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, vjp in reversed(self._nodes):
            if out.grad is None:
                continue
            og = out.grad
            grads = vjp(og)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # adopt freshly-allocated vjp outputs; copy views/aliases
                    if g.base is None and g is not og:
                        inp.grad = g
                    else:
                        inp.grad = np.array(g)
                else:
                    inp.grad += g


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _finite_check(data, opname):
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values in output of {opname}")


def _make(data, inputs: tuple[Tensor, ...], vjp, opname: str) -> Tensor:
    _finite_check(data, opname)
    out = Tensor(data)
    if _active_tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active_tape._nodes.append((out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(g, b.shape) if nb else None,
        )

    return _make(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if na else None,
            _unbroadcast(-g, b.shape) if nb else None,
        )

    return _make(data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, a.shape) if na else None,
            _unbroadcast(g * ad, b.shape) if nb else None,
        )

    return _make(data, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(a) -> Tensor:
    """GELU via the tanh approximation 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3)))."""
    a = _wrap(a)
    x = a.data
    t = np.empty_like(x)
    np.multiply(x, x, out=t)
    t *= x
    t *= _GELU_K
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = np.empty_like(x)
    np.add(t, 1.0, out=y)
    y *= x
    y *= 0.5

    def vjp(g):
        du = np.empty_like(x)
        np.multiply(x, x, out=du)
        du *= 3.0 * _GELU_K
        du += 1.0
        du *= _GELU_C
        s = np.empty_like(x)
        np.multiply(t, t, out=s)
        np.subtract(1.0, s, out=s)
        s *= du
        s *= x
        dy = np.empty_like(x)
        np.add(t, 1.0, out=dy)
        dy += s
        dy *= 0.5
        dy *= g
        return (dy,)

    return _make(y, (a,), vjp, "gelu")


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product [.., m, k] x [.., k, n] -> [.., m, n]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    if _mac_counter is not None:
        batch = int(np.prod(data.shape[:-2], dtype=np.int64)) if data.ndim > 2 else 1
        _mac_counter.add(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    na, nb = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if na else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if nb else None
        return (ga, gb)

    return _make(data, (a, b), vjp, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x[.., d_in] @ weight[d_out, d_in]^T (+ bias[d_out]) -> [.., d_out]."""
    x, weight = _wrap(x), _wrap(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"linear: input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    lead = x.shape[:-1]
    d_in, d_out = weight.shape[-1], weight.shape[0]
    # flatten leading dims: one big GEMM beats numpy's per-batch loop
    data = (x.data.reshape(-1, d_in) @ weight.data.T).reshape(lead + (d_out,))
    inputs = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        data = data + bias.data
        inputs.append(bias)
    if _mac_counter is not None:
        _mac_counter.add(int(np.prod(lead, dtype=np.int64)) * d_in * d_out)
    nx, nw = x.requires_grad, weight.requires_grad
    xd, wd = x.data, weight.data

    def vjp(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ wd).reshape(xd.shape) if nx else None
        gw = g2.T @ xd.reshape(-1, d_in) if nw else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _make(data, tuple(inputs), vjp, "linear")


# ---------------------------------------------------------------------------
# normalization / attention math
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Stable softmax along `axis`; `mask` (bool, broadcastable) marks allowed slots.

    Masked-out entries get exactly zero probability, so masked inputs can
    never leak into outputs or gradients.
    """
    x = _wrap(x)
    axis = axis if axis >= 0 else x.ndim + axis
    if not 0 <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    xd = x.data
    if mask is not None:
        # rows must have >= 1 allowed slot; exp(-inf) lands exactly on 0
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        shifted = np.where(mask, xd, -np.inf)
        m = shifted.max(axis=axis, keepdims=True)
        shifted -= m
        e = np.exp(shifted, out=shifted)
    else:
        m = xd.max(axis=axis, keepdims=True)
        e = xd - m
        np.exp(e, out=e)
    y = e
    y /= e.sum(axis=axis, keepdims=True)

    def vjp(g):
        s = (g * y).sum(axis=axis, keepdims=True)
        out = g - s
        out *= y
        return (out,)

    return _make(y, (x,), vjp, "softmax")


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last) + eps) * weight, per trailing vector."""
    x, weight = _wrap(x), _wrap(weight)
    d = x.shape[-1]
    if weight.shape != (d,):
        raise ShapeError(f"rms_norm: weight shape {weight.shape} != ({d},)")
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    y = xd * inv * wd
    nx, nw = x.requires_grad, weight.requires_grad

    def vjp(g):
        gx = None
        if nx:
            s = (g * wd * xd).sum(axis=-1, keepdims=True)
            gx = inv * (g * wd) - xd * (inv * inv * inv) * s / d
        gw = (g * xd * inv).reshape(-1, d).sum(axis=0) if nw else None
        return (gx, gw)

    return _make(y, (x, weight), vjp, "rms_norm")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Standard layer normalization over the trailing dimension."""
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    d = x.shape[-1]
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * weight.data + bias.data
    nx, nw, nb = x.requires_grad, weight.requires_grad, bias.requires_grad
    wd = weight.data

    def vjp(g):
        gx = None
        if nx:
            gw_ = g * wd
            m1 = gw_.mean(axis=-1, keepdims=True)
            m2 = (gw_ * xhat).mean(axis=-1, keepdims=True)
            gx = gw_
            gx -= m1
            m2 = m2 * xhat
            gx -= m2
            gx *= inv
        gweight = (g * xhat).reshape(-1, d).sum(axis=0) if nw else None
        gbias = g.reshape(-1, d).sum(axis=0) if nb else None
        return (gx, gweight, gbias)

    return _make(y, (x, weight, bias), vjp, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) at train time, identity at eval."""
    x = _wrap(x)
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def smoothed_cross_entropy(logits, targets, smoothing: float = 0.0, mask=None) -> Tensor:
    """Label-smoothed cross-entropy averaged over unmasked positions.

    Per position: (1-eps) * (-log p_target) + eps * mean_v(-log p_v).
    `mask` (bool, same leading shape as targets) selects the positions
    that contribute; everything else contributes exactly nothing.
    """
    logits = _wrap(logits)
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    V = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    x = logits.data.reshape(-1, V)
    if tgt.shape[0] != x.shape[0]:
        raise ShapeError(
            f"targets shape {np.shape(targets)} does not match logits {logits.shape}"
        )
    if mask is None:
        msk = np.ones(tgt.shape[0], dtype=bool)
    else:
        msk = np.asarray(mask, dtype=bool).reshape(-1)
    n = int(msk.sum())
    if n == 0:
        raise ValueError("smoothed_cross_entropy: loss mask selects no positions")
    if (tgt[msk] < 0).any() or (tgt[msk] >= V).any():
        raise IndexError(f"target ids outside [0, {V})")

    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    rows = np.arange(x.shape[0])
    safe_tgt = np.where(msk, tgt, 0)
    per_pos = -(1.0 - smoothing) * logp[rows, safe_tgt] - smoothing * logp.mean(axis=1)
    loss = (per_pos * msk).sum() / n
    data = np.asarray(loss, dtype=x.dtype)

    def vjp(g):
        p = np.exp(logp)
        grad = p.copy()
        grad[rows, safe_tgt] -= 1.0 - smoothing
        grad -= smoothing / V
        grad *= (msk / n)[:, None] * g
        return (grad.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _make(data, (logits,), vjp, "smoothed_cross_entropy")


# ---------------------------------------------------------------------------
# shape kernels
# ---------------------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in tensors]

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g[offsets[i] : offsets[i + 1]], 0, axis) if needs[i] else None
            for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), vjp, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries starting at `start` along `axis`."""
    x = _wrap(x)
    n = x.shape[axis]
    if not (0 <= start and start + length <= n):
        raise IndexError(f"narrow: [{start}, {start + length}) out of range for axis size {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = x.data[idx]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(data, (x,), vjp, "narrow")


def index_select(x, axis: int, indices) -> Tensor:
    """Gather the given indices along `axis` (gradients scatter-add back)."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_select expects a 1-D index array")
    if (idx < 0).any() or (idx >= x.shape[axis]).any():
        raise IndexError(f"index_select: indices out of range for axis size {x.shape[axis]}")
    data = np.take(x.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(data, (x,), vjp, "index_select")


def embedding(table, ids) -> Tensor:
    """Row lookup table[ids]; gradients route to the selected rows."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if (ids < 0).any() or (ids >= table.shape[0]).any():
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    data = table.data[ids]
    d = table.shape[1]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(data, (table,), vjp, "embedding")


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))
    return _make(data, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    data = x.data.reshape(shape)
    orig = x.shape
    return _make(data, (x,), lambda g: (g.reshape(orig),), "reshape")


def _reduce(x, axis, keepdims, mean: bool, opname: str) -> Tensor:
    x = _wrap(x)
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a if a >= 0 else x.ndim + a for a in axes)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    fn = np.mean if mean else np.sum
    data = fn(x.data, axis=axes or None, keepdims=keepdims)
    orig = x.shape

    def vjp(g):
        if not keepdims:
            for a in sorted(axes):
                g = np.expand_dims(g, a)
        g = np.broadcast_to(g, orig)
        return ((g / count).astype(x.dtype, copy=False) if mean else g.copy(),)

    return _make(data, (x,), vjp, opname)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=False, opname="reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=True, opname="reduce_mean")
