"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure. Ops build the
graph eagerly; backward() walks it in reverse topological order, visiting
each node exactly once. float32 is the training dtype, float64 is used by
gradient checks. Graphs are cheap throwaway objects rebuilt every step.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import _kernels as _k

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "set_debug_checks", "as_tensor",
    "param", "backward", "zero_grads", "add", "sub", "mul", "neg", "matmul",
    "reshape", "transpose", "concat", "narrow", "gather_rows", "take_tokens",
    "layer_norm", "masked_attention", "relu", "silu", "sigmoid", "square",
    "tsum", "tmean", "cross_entropy", "conv3x3", "upsample2x", "grad_check",
]


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf where the pipeline forbids it."""


_local = threading.local()
_DEBUG_CHECKS = False


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def set_debug_checks(on: bool) -> None:
    """Toggle per-op finite checks (off by default: hot path)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(on)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap x as a constant Tensor (no grad). Tensors pass through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def param(data, name: str) -> Tensor:
    """A named trainable leaf."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _const_like(x, ref: Tensor) -> Tensor:
    """Wrap a python scalar with the dtype of ref so float64 never leaks in."""
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _coerce(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    if not isinstance(b, Tensor):
        b = _const_like(b, a)
    return a, b


def _make(data, parents, backward_fn, op: str) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # Views (reshape/transpose backward) must be materialized: later
        # in-place accumulation would corrupt the buffer they alias.
        t.grad = g if (isinstance(g, np.ndarray) and g.flags.owndata) else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), back, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back, "neg")


def square(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        _accum(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), back, "square")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands of rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner-dimension mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(out, (a, b), back, "matmul")


# ------------------------------------------------------------------- shapes


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out, (a,), back, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _make(out, (a,), back, "transpose")


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(out, tuple(ts), back, "concat")


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accum(a, buf)

    return _make(out, (a,), back, "narrow")


def gather_rows(table, idx) -> Tensor:
    """table[idx] along axis 0; idx may have any shape (repeats allowed)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out = np.take(table.data, idx, axis=0)

    def back(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx.ravel(), g.reshape(-1, *table.data.shape[1:]))
        _accum(table, buf)

    return _make(out, (table,), back, "gather_rows")


def take_tokens(x, idx) -> Tensor:
    """x[:, idx, :] for a 1-D index array (select sequence positions)."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out = x.data[:, idx, :]

    def back(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, (slice(None), idx), g)
        _accum(x, buf)

    return _make(out, (x,), back, "take_tokens")


# -------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out, (a,), back, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis] if isinstance(axis, int) else int(
            np.prod([a.data.shape[i] for i in axis]))
    inv = 1.0 / count

    def back(g):
        gg = g * np.asarray(inv, dtype=a.data.dtype)
        if axis is None:
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())
            return
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), back, "mean")


# ------------------------------------------------------------ nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def back(g):
        _accum(a, g * (a.data > 0))

    return _make(out, (a,), back, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _k.sigmoid_forward(a.data)

    def back(g):
        _accum(a, _k.sigmoid_backward(out, g))

    return _make(out, (a,), back, "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = _k.silu_forward(x)

    def back(g):
        _accum(a, _k.silu_backward(x, g))

    return _make(out, (a,), back, "silu")


# ------------------------------------------------------------ normalization


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma = _coerce(x, gamma)
    beta = as_tensor(beta)
    out, xhat, inv = _k.layernorm_forward(x.data, gamma.data, beta.data, eps)

    def back(g):
        gx, ggamma, gbeta = _k.layernorm_backward(xhat, inv, gamma.data, g)
        _accum(x, gx)
        _accum(gamma, ggamma)
        _accum(beta, gbeta)

    return _make(out, (x, gamma, beta), back, "layer_norm")


# -------------------------------------------------------------- attention


def masked_attention(q, k, v, mask, scale: float) -> Tensor:
    """softmax(mask(q k^T * scale)) v with a boolean permission mask.

    q,k,v: (..., T, dh); mask: bool, broadcastable to (..., Tq, Tk), True
    where attention is permitted. Every query row must permit at least one key.
    """
    q, k = _coerce(q, k)
    v = as_tensor(v)
    mask = np.asarray(mask, dtype=bool)
    fully_open = bool(mask.all())
    if not fully_open and not mask.any(axis=-1).all():
        raise ValueError("attention mask has a fully-masked query row")
    # Fold the scale into q before the GEMM: the scaled copy is a head-dim
    # array, several times smaller than the score matrix it would otherwise
    # be applied to.
    scale = np.asarray(scale, dtype=q.dtype)
    qs = q.data * scale
    scores = qs @ k.data.swapaxes(-1, -2)
    if fully_open:
        w = _k.softmax_lastaxis(scores)
    else:
        # The masked kernel reads only permitted entries per row, so rows
        # with equal permitted content match bit for bit across masks.
        w = _k.softmax_lastaxis_masked(scores, mask)
    out = w @ v.data

    def back(g):
        gv = w.swapaxes(-1, -2) @ g
        _accum(v, _unbroadcast(gv, v.data.shape))
        gw = g @ v.data.swapaxes(-1, -2)
        gs = _k.softmax_backward(w, gw)
        _accum(q, _unbroadcast((gs @ k.data) * scale, q.data.shape))
        _accum(k, _unbroadcast(gs.swapaxes(-1, -2) @ qs, k.data.shape))

    return _make(out, (q, k, v), back, "masked_attention")


def self_attention(qkv, heads: int, mask, scale: float) -> Tensor:
    """Multi-head self-attention straight from packed projections.

    qkv: (B, T, 3d) laid out as [q | k | v] along the last axis; mask: bool
    (T, T), True where attention is permitted. Equivalent to splitting into
    per-head (B, heads, T, d/heads) tensors and calling masked_attention,
    but as one graph node: the split/merge bookkeeping happens on raw
    arrays, which avoids a dozen view-materializing nodes per block.
    """
    qkv = as_tensor(qkv)
    B, T, d3 = qkv.shape
    d = d3 // 3
    dh = d // heads
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T, T):
        raise ValueError(f"mask must be ({T},{T}), got {mask.shape}")
    fully_open = bool(mask.all())
    if not fully_open and not mask.any(axis=-1).all():
        raise ValueError("attention mask has a fully-masked query row")
    scale = np.asarray(scale, dtype=qkv.dtype)
    buf = qkv.data.reshape(B, T, 3, heads, dh)
    qs = buf[:, :, 0].transpose(0, 2, 1, 3) * scale      # (B,H,T,dh)
    k = buf[:, :, 1].transpose(0, 2, 1, 3)
    v = buf[:, :, 2].transpose(0, 2, 1, 3)
    scores = qs @ k.swapaxes(-1, -2)
    if fully_open:
        w = _k.softmax_lastaxis(scores)
    else:
        w = _k.softmax_lastaxis_masked(scores, mask)
    att = w @ v                                          # (B,H,T,dh)
    out = np.ascontiguousarray(att.transpose(0, 2, 1, 3)).reshape(B, T, d)

    def back(g):
        ga = g.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)
        gv = w.swapaxes(-1, -2) @ ga
        gw = ga @ v.swapaxes(-1, -2)
        gs = _k.softmax_backward(w, gw)
        gq = (gs @ k) * scale
        gk = gs.swapaxes(-1, -2) @ qs
        gbuf = np.empty((B, T, 3, heads, dh), dtype=qkv.dtype)
        gbuf[:, :, 0] = gq.transpose(0, 2, 1, 3)
        gbuf[:, :, 1] = gk.transpose(0, 2, 1, 3)
        gbuf[:, :, 2] = gv.transpose(0, 2, 1, 3)
        _accum(qkv, gbuf.reshape(B, T, d3))

    return _make(out, (qkv,), back, "self_attention")


# ------------------------------------------------------------------ losses


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.data.shape[0]:
        raise ValueError("cross_entropy expects logits (B,C) and labels (B,)")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=-1, keepdims=True)
    rows = np.arange(labels.shape[0])
    nll = -(z[rows, labels] - np.log(ez.sum(axis=-1)))
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g):
        gl = p.copy()
        gl[rows, labels] -= 1.0
        _accum(logits, gl * (g / labels.shape[0]))

    return _make(out, (logits,), back, "cross_entropy")


# ------------------------------------------------------------- convolution


def conv3x3(x, w, b) -> Tensor:
    """3x3 same-padded convolution, channels-last: x (B,H,W,Cin) -> (B,H,W,Cout).

    Implemented as nine shifted GEMMs so matmul stays the only dense kernel.
    """
    x, w = _coerce(x, w)
    b = as_tensor(b)
    B, H, W, Cin = x.data.shape
    if w.data.shape[:3] != (3, 3, Cin):
        raise ValueError(f"conv3x3 weight shape {w.data.shape} mismatches input {x.data.shape}")
    Cout = w.data.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, Cout), dtype=x.dtype)
    flat = []
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, dy:dy + H, dx:dx + W, :].reshape(-1, Cin)
            flat.append(patch)
            out += (patch @ w.data[dy, dx]).reshape(B, H, W, Cout)
    out += b.data

    def back(g):
        gflat = g.reshape(-1, Cout)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for i, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
            gw[dy, dx] = flat[i].T @ gflat
            gxp[:, dy:dy + H, dx:dx + W, :] += (gflat @ w.data[dy, dx].T).reshape(B, H, W, Cin)
        _accum(x, gxp[:, 1:1 + H, 1:1 + W, :])
        _accum(w, gw)
        _accum(b, g.sum(axis=(0, 1, 2)))

    return _make(out, (x, w, b), back, "conv3x3")


def upsample2x(x) -> Tensor:
    """Nearest-neighbor 2x upsampling on (B,H,W,C)."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def back(g):
        B, H2, W2, C = g.shape
        _accum(x, g.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4)))

    return _make(out, (x,), back, "upsample2x")


# ------------------------------------------------------------------ engine


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def grad_check(f, params, h: float = 1e-5, rng=None, max_coords: int | None = None):
    """Central-difference check of backward() against f.

    f: nullary callable rebuilding the (float64) graph and returning the scalar
    loss Tensor; params: leaves to check. Returns (max_rel_err, per-param dict).
    Relative error uses denominator max(1, |analytic|, |numeric|).
    """
    loss = f()
    if loss.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 graph")
    if not np.isfinite(loss.data):
        raise NonFiniteError("grad_check: loss is non-finite")
    zero_grads(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    per_param = {}
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.shape[0]
        coords = range(n)
        if max_coords is not None and n > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords, replace=False)
        err = 0.0
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            lp = float(f().data)
            flat[i] = keep - h
            lm = float(f().data)
            flat[i] = keep
            num = (lp - lm) / (2.0 * h)
            a = float(an.reshape(-1)[i])
            err = max(err, abs(a - num) / max(1.0, abs(a), abs(num)))
        per_param[p.name or f"param{id(p)}"] = err
        worst = max(worst, err)
    return worst, per_param
