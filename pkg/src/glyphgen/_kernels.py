"""Single-sweep kernels for the hot elementwise chains.

numpy evaluates an expression like ``g * (s + x * s * (1 - s))`` as a
string of full-array passes, and on this machine each pass over a
multi-megabyte temporary costs about as much as the arithmetic itself.
The kernels below fuse each chain into one or two fixed-order loops
(compiled with numba when available), which removes the temporaries and
keeps results bit-for-bit reproducible run to run — no threads, no
reassociation.  One deliberate exception: ``exp`` itself is always taken
through numpy, whose SIMD implementation is an order of magnitude faster
than the scalar libm call a compiled loop would make, so the exp-heavy
chains are split as [fused prologue] -> np.exp -> [fused epilogue].

Everything is shape-agnostic over leading axes: wrappers flatten to rows
over the last axis (or the last two for attention weights), run the
loops, and reshape back.  float32 and float64 specialize lazily, so the
64-bit derivative checks exercise the same code paths as training.
Pure-numpy fallbacks compute the same formulas when numba is missing.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly by every test run
    import numba

    njit = numba.njit(cache=True, fastmath=False)
    HAVE_NUMBA = True
except Exception:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(f):
        return f


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable split-by-sign sigmoid, written with arithmetic masking
    # (np.where is pathologically slow here).
    e = np.exp(-np.abs(x))
    base = e / (1.0 + e)
    return base + (x >= 0) * (1.0 - 2.0 * base)


# --------------------------------------------------------------- sigmoid
#
# All sigmoid-family kernels share one stable recipe: e = exp(-|x|) is
# sigmoid(-|x|) un-normalized, base = e/(1+e) = sigmoid(-|x|), and a
# branch-free select reflects it to sigmoid(x) for non-negative inputs.


@njit
def _neg_abs(x, out):
    for i in range(x.shape[0]):
        out[i] = -abs(x[i])


@njit
def _sigmoid_epilogue(x, e, out):
    for i in range(x.shape[0]):
        base = e[i] / (1.0 + e[i])
        flip = 1.0 if x[i] >= 0.0 else 0.0
        out[i] = base + flip * (1.0 - 2.0 * base)


@njit
def _silu_epilogue(x, e, out):
    for i in range(x.shape[0]):
        base = e[i] / (1.0 + e[i])
        flip = 1.0 if x[i] >= 0.0 else 0.0
        s = base + flip * (1.0 - 2.0 * base)
        out[i] = x[i] * s


@njit
def _silu_bwd_epilogue(x, e, g, out):
    for i in range(x.shape[0]):
        base = e[i] / (1.0 + e[i])
        flip = 1.0 if x[i] >= 0.0 else 0.0
        s = base + flip * (1.0 - 2.0 * base)
        out[i] = g[i] * (s + x[i] * s * (1.0 - s))


@njit
def _sigmoid_bwd(s, g, out):
    for i in range(s.shape[0]):
        out[i] = g[i] * s[i] * (1.0 - s[i])


def _exp_neg_abs(x: np.ndarray) -> np.ndarray:
    e = np.empty_like(x)
    _neg_abs(x.reshape(-1), e.reshape(-1))
    np.exp(e, out=e)
    return e


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    e = _exp_neg_abs(x)
    out = np.empty_like(x)
    _sigmoid_epilogue(x.reshape(-1), e.reshape(-1), out.reshape(-1))
    return out


def sigmoid_backward(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    s = np.ascontiguousarray(s)
    g = np.ascontiguousarray(g, dtype=s.dtype)
    out = np.empty_like(s)
    _sigmoid_bwd(s.reshape(-1), g.reshape(-1), out.reshape(-1))
    return out


def silu_forward(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    e = _exp_neg_abs(x)
    out = np.empty_like(x)
    _silu_epilogue(x.reshape(-1), e.reshape(-1), out.reshape(-1))
    return out


def silu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    e = _exp_neg_abs(x)
    out = np.empty_like(x)
    _silu_bwd_epilogue(x.reshape(-1), e.reshape(-1), g.reshape(-1),
                       out.reshape(-1))
    return out


# --------------------------------------------------------------- softmax


@njit
def _rowmax_sub(scores, out):
    R, T = scores.shape
    for r in range(R):
        m = scores[r, 0]
        for j in range(1, T):
            m = scores[r, j] if scores[r, j] > m else m
        for j in range(T):
            out[r, j] = scores[r, j] - m


@njit
def _rowmax_sub_masked(scores, mask, out):
    # scores: (G, T, T); mask: (T, T) True where attention is permitted.
    # Blocked entries come out as -inf, which np.exp turns into exact 0,
    # so each softmax row depends only on its permitted entries and rows
    # with equal permitted content match bit for bit across masks.
    G, T, _ = scores.shape
    for gdx in range(G):
        for r in range(T):
            m = -np.inf
            for j in range(T):
                v = scores[gdx, r, j] if mask[r, j] else -np.inf
                m = v if v > m else m
            for j in range(T):
                out[gdx, r, j] = scores[gdx, r, j] - m if mask[r, j] else -np.inf


@njit
def _rownorm(e):
    R, T = e.shape
    for r in range(R):
        tot = 0.0
        for j in range(T):
            tot += e[r, j]
        inv = 1.0 / tot
        for j in range(T):
            e[r, j] *= inv


@njit
def _softmax_bwd_rows(w, g, out):
    R, T = w.shape
    for r in range(R):
        dot = 0.0
        for j in range(T):
            dot += w[r, j] * g[r, j]
        for j in range(T):
            out[r, j] = w[r, j] * (g[r, j] - dot)


def softmax_lastaxis(scores: np.ndarray) -> np.ndarray:
    scores = np.ascontiguousarray(scores)
    T = scores.shape[-1]
    out = np.empty_like(scores)
    _rowmax_sub(scores.reshape(-1, T), out.reshape(-1, T))
    np.exp(out, out=out)
    _rownorm(out.reshape(-1, T))
    return out


def softmax_lastaxis_masked(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked row softmax; ``mask`` is (T, T), scores (..., T, T)."""
    scores = np.ascontiguousarray(scores)
    T = scores.shape[-1]
    out = np.empty_like(scores)
    _rowmax_sub_masked(scores.reshape(-1, scores.shape[-2], T), mask,
                       out.reshape(-1, scores.shape[-2], T))
    np.exp(out, out=out)
    _rownorm(out.reshape(-1, T))
    return out


def softmax_backward(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through row softmax: w * (g - sum(w * g))."""
    w = np.ascontiguousarray(w)
    g = np.ascontiguousarray(g, dtype=w.dtype)
    out = np.empty_like(w)
    _softmax_bwd_rows(w.reshape(-1, w.shape[-1]), g.reshape(-1, w.shape[-1]),
                      out.reshape(-1, w.shape[-1]))
    return out


# ------------------------------------------------------------ layer norm


@njit
def _layernorm_fwd(x, gamma, beta, eps, out, xhat, inv):
    R, D = x.shape
    for r in range(R):
        mu = 0.0
        for j in range(D):
            mu += x[r, j]
        mu /= D
        var = 0.0
        for j in range(D):
            d = x[r, j] - mu
            var += d * d
        var /= D
        iv = 1.0 / np.sqrt(var + eps)
        inv[r] = iv
        for j in range(D):
            h = (x[r, j] - mu) * iv
            xhat[r, j] = h
            out[r, j] = h * gamma[j] + beta[j]


@njit
def _layernorm_bwd(xhat, inv, gamma, g, gx, ggamma, gbeta):
    R, D = xhat.shape
    for j in range(D):
        ggamma[j] = 0.0
        gbeta[j] = 0.0
    for r in range(R):
        m1 = 0.0
        m2 = 0.0
        for j in range(D):
            gxh = g[r, j] * gamma[j]
            m1 += gxh
            m2 += gxh * xhat[r, j]
            ggamma[j] += g[r, j] * xhat[r, j]
            gbeta[j] += g[r, j]
        m1 /= D
        m2 /= D
        iv = inv[r]
        for j in range(D):
            gx[r, j] = iv * (g[r, j] * gamma[j] - m1 - xhat[r, j] * m2)


def layernorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      eps: float):
    """Returns (out, xhat, inv) with xhat/inv saved for the backward pass."""
    x = np.ascontiguousarray(x)
    D = x.shape[-1]
    rows = x.reshape(-1, D)
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(rows.shape[0], dtype=x.dtype)
    _layernorm_fwd(rows, np.ascontiguousarray(gamma, dtype=x.dtype),
                   np.ascontiguousarray(beta, dtype=x.dtype),
                   float(eps), out.reshape(-1, D), xhat.reshape(-1, D), inv)
    return out, xhat, inv


def layernorm_backward(xhat: np.ndarray, inv: np.ndarray, gamma: np.ndarray,
                       g: np.ndarray):
    """Returns (gx, ggamma, gbeta) for the forward saved by layernorm_forward."""
    D = xhat.shape[-1]
    g = np.ascontiguousarray(g, dtype=xhat.dtype)
    gx = np.empty_like(xhat)
    ggamma = np.empty(D, dtype=xhat.dtype)
    gbeta = np.empty(D, dtype=xhat.dtype)
    _layernorm_bwd(xhat.reshape(-1, D), inv,
                   np.ascontiguousarray(gamma, dtype=xhat.dtype),
                   g.reshape(-1, D), gx.reshape(-1, D), ggamma, gbeta)
    return gx, ggamma, gbeta


if not HAVE_NUMBA:  # pragma: no cover - numpy fallbacks, same formulas
    def sigmoid_forward(x):  # noqa: F811
        return _np_sigmoid(np.asarray(x))

    def sigmoid_backward(s, g):  # noqa: F811
        return g * s * (1.0 - s)

    def silu_forward(x):  # noqa: F811
        x = np.asarray(x)
        return x * _np_sigmoid(x)

    def silu_backward(x, g):  # noqa: F811
        s = _np_sigmoid(np.asarray(x))
        return g * (s + x * s * (1.0 - s))

    def softmax_lastaxis(scores):  # noqa: F811
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        return e / e.sum(axis=-1, keepdims=True)

    def softmax_lastaxis_masked(scores, mask):  # noqa: F811
        bias = np.zeros(mask.shape, dtype=scores.dtype)
        bias[~mask] = -np.inf
        biased = scores + bias
        m = biased.max(axis=-1, keepdims=True)
        e = np.exp(biased - m)
        return e / e.sum(axis=-1, keepdims=True)

    def softmax_backward(w, g):  # noqa: F811
        return w * (g - (g * w).sum(axis=-1, keepdims=True))

    def layernorm_forward(x, gamma, beta, eps):  # noqa: F811
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        xhat = xc * inv
        return xhat * gamma + beta, xhat, inv[..., 0]

    def layernorm_backward(xhat, inv, gamma, g):  # noqa: F811
        gxh = g * gamma
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = (gxh * xhat).mean(axis=-1, keepdims=True)
        gx = inv.reshape(xhat.shape[:-1] + (1,)) * (gxh - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
