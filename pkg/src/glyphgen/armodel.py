"""Position-query autoregressive backbone over latent tokens.

The sequence layout interleaves learned position queries with latent-token
embeddings under a fresh uniform token order per image:

    [cond, Q_{p(1)}, z_{p(1)}, Q_{p(2)}, z_{p(2)}, ...]

Training runs one causal forward over the full layout; the hidden state at
each query slot conditions a flow head that regresses the next latent.
Decoding recomputes the same full-layout forward with a group mask: the
queries of a group attend the condition token, all committed pairs, earlier
queries, and themselves, never each other. Group size 1 therefore reproduces
the training-time causal rows bit for bit, and larger groups trade passes
for parallel token commitment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flowhead as fh
from . import layers
from .layers import ParamStore


@dataclass
class ARConfig:
    n_tokens: int = 64
    d_z: int = 8
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    n_cond: int = 64

    @property
    def seq_len(self) -> int:
        return 1 + 2 * self.n_tokens


@dataclass
class PassCounter:
    """Counts backbone forward passes during decoding."""
    count: int = 0


def sample_permutation(n: int, rng) -> np.ndarray:
    """Uniform random token order (seeded Fisher-Yates)."""
    return rng.permutation(n)


def plan_groups(perm: np.ndarray, group_size: int) -> list[np.ndarray]:
    """Split a generation order into consecutive decode groups."""
    n = perm.shape[0]
    if not 1 <= group_size <= n:
        raise ValueError(f"group size must be in [1, {n}], got {group_size}")
    return [perm[i:i + group_size] for i in range(0, n, group_size)]


class ARBackbone:
    """Causal transformer over the interleaved query/latent layout."""

    def __init__(self, cfg: ARConfig, rng, dtype=np.float32,
                 store: ParamStore | None = None, prefix: str = "ar"):
        self.cfg = cfg
        self.dtype = dtype
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        d = cfg.d_model

        def table(n):
            return (rng.standard_normal((n, d)) * 0.02).astype(dtype)

        self.store.add(f"{prefix}.cond", table(cfg.n_cond))
        self.store.add(f"{prefix}.query", table(cfg.n_tokens))
        self.store.add(f"{prefix}.vpos", table(cfg.n_tokens))
        layers.add_linear(self.store, f"{prefix}.inz", cfg.d_z, d, rng, dtype)
        for i in range(cfg.depth):
            layers.add_block(self.store, f"{prefix}.block{i}", d, cfg.mlp_ratio, rng, dtype)
        layers.add_layer_norm(self.store, f"{prefix}.final", d, dtype)
        self.query_slots = 1 + 2 * np.arange(cfg.n_tokens)

    def causal_mask(self) -> np.ndarray:
        T = self.cfg.seq_len
        return np.tril(np.ones((T, T), dtype=bool))

    def decode_mask(self, committed: int, group_len: int) -> np.ndarray:
        """Training mask with the group's query rows restricted to the
        condition token, committed pairs, and themselves."""
        n = self.cfg.n_tokens
        if not 0 <= committed < n or not 1 <= group_len <= n - committed:
            raise ValueError(f"invalid decode window at k={committed}, g={group_len}")
        mask = self.causal_mask()
        lo = 1 + 2 * committed
        for j in range(group_len):
            row = lo + 2 * j
            mask[row, lo:row + 1] = False
            mask[row, row] = True
        return mask

    def embed_sequence(self, z_gen, perm: np.ndarray, cond_ids: np.ndarray) -> ad.Tensor:
        """Build the interleaved layout.

        z_gen: (B,N,d_z) latents already in generation order (array, or a
        Tensor when latent gradients are wanted); perm: (B,N) spatial indices
        in generation order; cond_ids: (B,) class conditions.
        """
        cfg = self.cfg
        perm = np.asarray(perm)
        cond_ids = np.asarray(cond_ids)
        B, N = perm.shape
        if N != cfg.n_tokens:
            raise ValueError(f"expected {cfg.n_tokens} tokens, got {N}")
        p = self.prefix
        z_gen = ad.as_tensor(z_gen, dtype=self.dtype)
        ze = ad.add(layers.linear(self.store, f"{p}.inz", z_gen),
                    ad.gather_rows(self.store[f"{p}.vpos"], perm))
        qe = ad.gather_rows(self.store[f"{p}.query"], perm)
        ce = ad.reshape(ad.gather_rows(self.store[f"{p}.cond"], cond_ids),
                        (B, 1, cfg.d_model))
        pairs = ad.concat([ad.reshape(qe, (B, N, 1, cfg.d_model)),
                           ad.reshape(ze, (B, N, 1, cfg.d_model))], axis=2)
        return ad.concat([ce, ad.reshape(pairs, (B, 2 * N, cfg.d_model))], axis=1)

    def forward(self, seq: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
        p = self.prefix
        h = seq
        for i in range(self.cfg.depth):
            h = layers.block_forward(self.store, f"{p}.block{i}", h, self.cfg.heads, mask)
        return layers.layer_norm(self.store, f"{p}.final", h)

    def training_hidden(self, z_gen, perm, cond_ids) -> ad.Tensor:
        """(B,N,d_model) hidden states at the query slots, causal layout."""
        seq = self.embed_sequence(z_gen, perm, cond_ids)
        H = self.forward(seq, self.causal_mask())
        return ad.take_tokens(H, self.query_slots)


# ------------------------------------------------------------------ decode


def _token_rng(run_seed: int, image_index: int, token: int):
    """Independent stream per (run, image, spatial token)."""
    return np.random.default_rng([run_seed, image_index, token])


def decode_latents(backbone: ARBackbone, head: fh.FlowHead, cond_id: int,
                   run_seed: int, image_index: int, group_size: int = 1,
                   flow_steps: int = 50, shift_tokens: int | None = None,
                   counter: PassCounter | None = None,
                   perm: np.ndarray | None = None) -> np.ndarray:
    """Generate one image's normalized latents, spatial order (N, d_z).

    Each group runs one full-layout backbone pass under the decode mask, then
    integrates the flow head for all group tokens in parallel with per-token
    noise streams keyed by spatial index. perm overrides the sampled token
    order (tests use this to probe order invariances).
    """
    cfg = backbone.cfg
    if shift_tokens is None:
        shift_tokens = cfg.d_z * cfg.n_tokens
    rng_img = np.random.default_rng([run_seed, image_index])
    if perm is None:
        perm = sample_permutation(cfg.n_tokens, rng_img)
    # Within a group the queries never attend each other, so their order in
    # the layout carries no meaning; canonicalize it (sorted spatial index)
    # so group-order exchangeability is exact down to the last bit.
    groups = [np.sort(g) for g in plan_groups(perm, group_size)]
    perm = np.concatenate(groups)
    z_gen = np.zeros((1, cfg.n_tokens, cfg.d_z), dtype=backbone.dtype)
    out = np.zeros((cfg.n_tokens, cfg.d_z), dtype=backbone.dtype)
    committed = 0
    with ad.no_grad():
        for group in groups:
            g = group.shape[0]
            seq = backbone.embed_sequence(z_gen, perm[None, :], np.array([cond_id]))
            H = backbone.forward(seq, backbone.decode_mask(committed, g))
            if counter is not None:
                counter.count += 1
            rows = H.data[0, 1 + 2 * (committed + np.arange(g))]
            eps = np.stack([_token_rng(run_seed, image_index, int(tk)).standard_normal(cfg.d_z)
                            for tk in group])
            z = fh.flow_sample(lambda zz, t: head.velocity(zz, t, rows), cfg.d_z,
                               rng=None, steps=flow_steps, shift_tokens=shift_tokens,
                               n_rows=g, eps=eps, dtype=backbone.dtype)
            for j, tk in enumerate(group):
                out[tk] = z[j]
                z_gen[0, committed + j] = z[j]
            committed += g
    return out


def decode_latents_sequential(backbone: ARBackbone, head: fh.FlowHead, cond_id: int,
                              run_seed: int, image_index: int, flow_steps: int = 50,
                              shift_tokens: int | None = None,
                              counter: PassCounter | None = None,
                              perm: np.ndarray | None = None) -> np.ndarray:
    """Reference decoder: one token per pass under the plain training mask.

    Independent code path from decode_latents, used as its oracle: group
    size 1 must reproduce this bit for bit.
    """
    cfg = backbone.cfg
    if shift_tokens is None:
        shift_tokens = cfg.d_z * cfg.n_tokens
    rng_img = np.random.default_rng([run_seed, image_index])
    if perm is None:
        perm = sample_permutation(cfg.n_tokens, rng_img)
    z_gen = np.zeros((1, cfg.n_tokens, cfg.d_z), dtype=backbone.dtype)
    out = np.zeros((cfg.n_tokens, cfg.d_z), dtype=backbone.dtype)
    mask = backbone.causal_mask()
    with ad.no_grad():
        for t in range(cfg.n_tokens):
            seq = backbone.embed_sequence(z_gen, perm[None, :], np.array([cond_id]))
            H = backbone.forward(seq, mask)
            if counter is not None:
                counter.count += 1
            row = H.data[0, 1 + 2 * t][None, :]
            token = int(perm[t])
            eps = _token_rng(run_seed, image_index, token).standard_normal((1, cfg.d_z))
            z = fh.flow_sample(lambda zz, tt: head.velocity(zz, tt, row), cfg.d_z,
                               rng=None, steps=flow_steps, shift_tokens=shift_tokens,
                               n_rows=1, eps=eps, dtype=backbone.dtype)
            out[token] = z[0]
            z_gen[0, t] = z[0]
    return out


def generate_images(ae, backbone: ARBackbone, head: fh.FlowHead,
                    cond_ids, run_seed: int, group_size: int = 1,
                    flow_steps: int = 50, shift_tokens: int | None = None,
                    counter: PassCounter | None = None) -> np.ndarray:
    """Decode latents for each condition and render them through the decoder.

    Images are decoded one at a time on identical code paths, so outputs are
    a function of (run_seed, image index, condition) only, never of batch
    composition or group size.
    """
    cond_ids = np.asarray(cond_ids)
    imgs = []
    with ad.no_grad():
        for i, cid in enumerate(cond_ids):
            z = decode_latents(backbone, head, int(cid), run_seed, i,
                               group_size=group_size, flow_steps=flow_steps,
                               shift_tokens=shift_tokens, counter=counter)
            imgs.append(ae.decode(z[None, :, :]).data[0])
    return np.stack(imgs)
