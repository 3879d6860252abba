"""Reverse-mode autodiff over numpy arrays.

Tensors wrap row-major numpy arrays (float32 for training, float64 for
verification paths). Graphs are built define-by-run: every op records its
parent tensors and a closure that maps the output gradient onto them.
``backward(loss)`` walks the recorded nodes in reverse topological order
exactly once.

All reductions go through numpy's fixed blocked summation, so forward
results are bit-identical across runs for identical inputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

F32 = np.float32
F64 = np.float64

_GRAD_ENABLED = True


class FlopCounter:
    """Accumulates multiply-accumulate counts (x2) of every matmul forward."""

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += n


_FLOP_COUNTER: FlopCounter | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/eval paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def count_flops():
    """Count matmul FLOPs (2*m*k*n each) executed inside the block."""
    global _FLOP_COUNTER
    prev = _FLOP_COUNTER
    counter = FlopCounter()
    _FLOP_COUNTER = counter
    try:
        yield counter
    finally:
        _FLOP_COUNTER = prev


def _record_matmul_flops(out_shape, k: int):
    if _FLOP_COUNTER is not None:
        n = 2 * k
        for d in out_shape:
            n *= int(d)
        _FLOP_COUNTER.add(n)


class Tensor:
    """A node in the autodiff graph holding a numpy array and its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    t = Tensor(np.ascontiguousarray(data))
    t.requires_grad = True  # parameters stay differentiable even under no_grad blocks
    t.name = name
    return t


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _needs_grad(*ts: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = a.data.dtype.type(c)
    out_data = a.data * c
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g * c)

    return Tensor(out_data, True, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[..., m, k] @ [k, n]`` (shared right operand, e.g. a weight)
    and ``[..., m, k] @ [..., k, n]`` with identical leading batch dims.
    """
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    flatten = bd.ndim == 2 and ad.ndim > 2 and ad.flags.c_contiguous
    if flatten:
        # one big GEMM instead of a cblas call per leading slice
        k = ad.shape[-1]
        out_data = (ad.reshape(-1, k) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out_data = ad @ bd
    _record_matmul_flops(out_data.shape, ad.shape[-1])
    if not _needs_grad(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            if bd.ndim == 2 and g.ndim > 2 and g.flags.c_contiguous:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = g @ bd.swapaxes(-1, -2)
            a.accumulate_grad(ga)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = ad.swapaxes(-1, -2) @ g
            b.accumulate_grad(gb)

    return Tensor(out_data, True, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_grad(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(s, e)
                t.accumulate_grad(g[tuple(idx)])

    return Tensor(out_data, True, tuple(tensors), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing (the `slice` primitive); gradient scatters back."""
    out_data = a.data[idx]
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a.accumulate_grad(full)

    return Tensor(out_data, True, (a,), backward)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0: out[i] = a[indices[i]]. Repeats allowed."""
    indices = np.asarray(indices)
    out_data = a.data[indices]
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        a.accumulate_grad(full)

    return Tensor(out_data, True, (a,), backward)


def take_rows_batched(a: Tensor, indices: np.ndarray) -> Tensor:
    """Per-batch row gather: a [B, M, d], indices [B, T] -> [B, T, d]."""
    indices = np.asarray(indices)
    batch = np.arange(a.data.shape[0])[:, None]
    out_data = a.data[batch, indices]
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, indices), g)
        a.accumulate_grad(full)

    return Tensor(out_data, True, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.data.shape[0]})")
    out_data = table.data[ids]
    if not _needs_grad(table):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table.accumulate_grad(full)

    return Tensor(out_data, True, (table,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part).

    Constant inputs normalize to zero: the eps sits inside the square root.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    out_data = xc * inv
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        d = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out_data).mean(axis=-1, keepdims=True)
        a.accumulate_grad(inv * (g - gm - out_data * gym))

    return Tensor(out_data, True, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + k x^3)))."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    # written with in-place updates; the naive form allocates five temporaries
    inner = x * x
    inner *= k
    inner += one
    inner *= x
    inner *= c
    t = np.tanh(inner)
    out_data = t + one
    out_data *= half
    out_data *= x
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        k3 = x.dtype.type(3.0 * 0.044715)
        dinner = x * x
        dinner *= k3
        dinner += one
        dinner *= c
        da = one - t * t
        da *= dinner
        da *= x
        da += t
        da += one
        da *= half
        da *= g
        a.accumulate_grad(da)

    return Tensor(out_data, True, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                        np.exp(x) / (1.0 + np.exp(x))).astype(x.dtype)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g * out_data * (1.0 - out_data))

    return Tensor(out_data, True, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    out_data = x - m
    np.exp(out_data, out=out_data)
    s = out_data.sum(axis=axis, keepdims=True)
    out_data /= s
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        gx = g - dot
        gx *= out_data
        a.accumulate_grad(gx)

    return Tensor(out_data, True, (a,), backward)


def most_negative(dtype) -> float:
    return float(np.finfo(dtype).min)


def masked_fill(a: Tensor, allow: np.ndarray, fill: float | None = None) -> Tensor:
    """Write the most negative finite value where ``allow`` is False.

    Used ahead of softmax; filled positions end up with probability 0 and
    receive no gradient.
    """
    if fill is None:
        fill = most_negative(a.data.dtype)
    allow = np.asarray(allow, dtype=bool)
    out_data = np.where(allow, a.data, a.data.dtype.type(fill))
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        a.accumulate_grad(np.where(allow, g, g.dtype.type(0.0)))

    return Tensor(out_data, True, (a,), backward)


def mean_over_span(a: Tensor, start: int, stop: int) -> Tensor:
    """Mean of rows ``a[start:stop]`` (axis 0). Span must be non-empty."""
    if stop <= start:
        raise ShapeError(f"empty span [{start}, {stop})")
    out_data = a.data[start:stop].mean(axis=0)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g / (stop - start)
        a.accumulate_grad(full)

    return Tensor(out_data, True, (a,), backward)


def layer_norm_affine(a: Tensor, gain: Tensor, bias: Tensor,
                      eps: float = LAYER_NORM_EPS) -> Tensor:
    """layer_norm(a) * gain + bias fused into one node (hot path)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    var += x.dtype.type(eps)
    inv = np.sqrt(var, out=var)
    np.divide(1.0, inv, out=inv)
    normed = xc
    normed *= inv
    out_data = normed * gain.data
    out_data += bias.data
    if not _needs_grad(a, gain, bias):
        return Tensor(out_data)

    def backward(g):
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, x.shape[-1]).sum(axis=0)
            gain.accumulate_grad(gg)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if a.requires_grad:
            gn = g * gain.data
            gm = gn.mean(axis=-1, keepdims=True)
            gym = (gn * normed).mean(axis=-1, keepdims=True)
            gn -= gm
            gn -= normed * gym
            gn *= inv
            a.accumulate_grad(gn)

    return Tensor(out_data, True, (a, gain, bias), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward, zero backward."""
    return Tensor(a.data)


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding on the last axis.

    a: [..., T, hd] with hd even; cos/sin broadcastable to a's shape,
    typically [T, hd] or [B, 1, T, hd]. Pairs are the two halves of the
    last axis: out = a*cos + rotate_half(a)*sin.
    """
    x = a.data
    hd = x.shape[-1]
    h = hd // 2
    rot = np.concatenate([-x[..., h:], x[..., :h]], axis=-1)
    out_data = x * cos + rot * sin
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        gs = g * sin
        rot_inv = np.concatenate([gs[..., h:], -gs[..., :h]], axis=-1)
        a.accumulate_grad(g * cos + rot_inv)

    return Tensor(out_data, True, (a,), backward)


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    """cos/sin tables for ``rope``: shape positions.shape + (head_dim,)."""
    if head_dim % 2:
        raise ShapeError("rope needs an even head dim")
    h = head_dim // 2
    inv = base ** (-np.arange(h, dtype=np.float64) / h)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def sum_all(a: Tensor) -> Tensor:
    out_data = a.data.sum(dtype=a.data.dtype).reshape(())
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return Tensor(out_data, True, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)
    if not _needs_grad(a):
        return Tensor(out_data)

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    # materialized: strided views push matmul and elementwise consumers onto
    # slow non-SIMD paths that cost far more than one copy
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    if not _needs_grad(a):
        return Tensor(out_data)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return Tensor(out_data, True, (a,), backward)


def swap_last2(a: Tensor) -> Tensor:
    n = a.data.ndim
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood in nats.

    logits: [..., V]; targets: integer array of the leading shape. ``mask``
    selects the positions that contribute; the mean is over selected
    positions only.
    """
    V = logits.data.shape[-1]
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError(f"target id out of range [0, {V})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(s)).squeeze(-1)
    picked = np.take_along_axis(x, targets[..., None], axis=-1).squeeze(-1)
    nll = lse - picked
    if mask is None:
        count = nll.size
        total = nll.sum(dtype=x.dtype)
    else:
        mask = np.asarray(mask, dtype=bool)
        count = int(mask.sum())
        if count == 0:
            raise ShapeError("cross_entropy mask selects no positions")
        total = nll[mask].sum(dtype=x.dtype)
    out_data = np.asarray(total / x.dtype.type(count), dtype=x.dtype)
    if not _needs_grad(logits):
        return Tensor(out_data)

    def backward(g):
        p = e / s
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        gl = (p - onehot) * (g / count)
        if mask is not None:
            gl = gl * mask[..., None]
        logits.accumulate_grad(gl.astype(x.dtype))

    return Tensor(out_data, True, (logits,), backward)


def nll_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood in nats (numpy in, numpy out)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))).squeeze(-1)
    picked = np.take_along_axis(logits, np.asarray(targets)[..., None], axis=-1).squeeze(-1)
    return lse - picked


def entropy_from_logits(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of softmax(logits) along the last axis."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=-1, keepdims=True)
    p = e / s
    lse = m + np.log(s)
    # H = -sum p*log p = lse - sum p*logits, evaluated stably
    return (lse.squeeze(-1) - (p * logits).sum(axis=-1)).astype(logits.dtype)


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Populate ``.grad`` on every reachable differentiable tensor.

    The loss must be scalar. Parameters themselves are never modified.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(builder: Callable[[], Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    ``builder`` rebuilds the scalar loss from the current ``.data`` of the
    given inputs (float64). Returns the max relative error
    ``|a - n| / max(1, |a|, |n|)`` over all coordinates.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.zero_grad()
    loss = builder()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(builder().data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(builder().data)
            flat[i] = orig
            n = (f_plus - f_minus) / (2.0 * eps)
            av = a.reshape(-1)[i]
            err = abs(av - n) / max(1.0, abs(av), abs(n))
            if err > worst:
                worst = err
    return worst
