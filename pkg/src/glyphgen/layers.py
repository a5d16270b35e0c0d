"""Shared model plumbing: named parameter stores, linear/transformer blocks,
and the sinusoidal time embedding. Models are plain objects owning a
ParamStore; forward passes are functions over autodiff Tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class ParamStore:
    """Flat dict of named parameter Tensors with freeze/copy helpers."""

    def __init__(self):
        self._params: dict[str, ad.Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> ad.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = ad.param(array, name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> ad.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def trainable(self):
        return [p for p in self._params.values() if p.requires_grad]

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        for name, p in self._params.items():
            if name.startswith(prefix):
                p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in state]
        extra = [n for n in state if n not in self._params]
        if missing or extra:
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


def add_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng,
               dtype, std: float = 0.02) -> None:
    store.add(f"{name}.w", _normal(rng, (fan_in, fan_out), std, dtype))
    store.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))


def linear(store: ParamStore, name: str, x: ad.Tensor) -> ad.Tensor:
    w = store[f"{name}.w"]
    b = store[f"{name}.b"]
    shape = x.shape
    if len(shape) > 2:
        # One large GEMM over flattened leading axes beats a stack of small
        # batched GEMMs, both forward and backward.
        flat = ad.reshape(x, (-1, shape[-1]))
        out = ad.add(ad.matmul(flat, w), b)
        return ad.reshape(out, (*shape[:-1], w.shape[-1]))
    return ad.add(ad.matmul(x, w), b)


def add_layer_norm(store: ParamStore, name: str, dim: int, dtype) -> None:
    store.add(f"{name}.g", np.ones(dim, dtype=dtype))
    store.add(f"{name}.b", np.zeros(dim, dtype=dtype))


def layer_norm(store: ParamStore, name: str, x: ad.Tensor) -> ad.Tensor:
    return ad.layer_norm(x, store[f"{name}.g"], store[f"{name}.b"])


def add_block(store: ParamStore, name: str, dim: int, mlp_ratio: int, rng, dtype) -> None:
    """Pre-norm transformer block parameters."""
    add_layer_norm(store, f"{name}.ln1", dim, dtype)
    add_linear(store, f"{name}.attn.qkv", dim, 3 * dim, rng, dtype)
    add_linear(store, f"{name}.attn.out", dim, dim, rng, dtype)
    add_layer_norm(store, f"{name}.ln2", dim, dtype)
    add_linear(store, f"{name}.mlp.fc1", dim, mlp_ratio * dim, rng, dtype)
    add_linear(store, f"{name}.mlp.fc2", mlp_ratio * dim, dim, rng, dtype)


def block_forward(store: ParamStore, name: str, x: ad.Tensor, heads: int,
                  mask: np.ndarray) -> ad.Tensor:
    """x: (B,T,d) -> (B,T,d); mask: bool (T,T), True = may attend."""
    B, T, d = x.shape
    dh = d // heads
    h = layer_norm(store, f"{name}.ln1", x)
    qkv = linear(store, f"{name}.attn.qkv", h)
    att = ad.self_attention(qkv, heads, mask, 1.0 / np.sqrt(dh))
    x = ad.add(x, linear(store, f"{name}.attn.out", att))
    h2 = layer_norm(store, f"{name}.ln2", x)
    m = linear(store, f"{name}.mlp.fc2", ad.silu(linear(store, f"{name}.mlp.fc1", h2)))
    return ad.add(x, m)


def time_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of flow times t in [0,1]: (M,) -> (M, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
