"""Semantically-aligned image autoencoder.

A small vision transformer encodes images into patch tokens; a residual
projection (per-token linear + pooled skip) maps them to compact latents;
a convolutional decoder maps latents back to pixels. Training runs in two
stages: stage 1 fits encoder+projection+decoder with reconstruction,
teacher-feature perceptual, and feature-distillation terms; stage 2 freezes
the semantic side, normalizes latents per channel, injects Gaussian noise,
and refits the decoder so it tolerates imperfect latents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .layers import ParamStore

STATS_EPS = 1e-6


@dataclass
class EncoderConfig:
    image_size: int = 16
    patch: int = 2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


class SemanticEncoder:
    """Patch-embedding transformer: (B,S,S,3) images -> (B,N,dim) tokens."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float32,
                 store: ParamStore | None = None, prefix: str = "enc"):
        self.cfg = cfg
        self.dtype = dtype
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        d, p = cfg.dim, cfg.patch
        layers.add_linear(self.store, f"{prefix}.embed", p * p * 3, d, rng, dtype)
        self.store.add(f"{prefix}.pos", (rng.standard_normal((cfg.n_tokens, d)) * 0.02).astype(dtype))
        for i in range(cfg.depth):
            layers.add_block(self.store, f"{prefix}.block{i}", d, cfg.mlp_ratio, rng, dtype)
        layers.add_layer_norm(self.store, f"{prefix}.final", d, dtype)
        self._mask = np.ones((cfg.n_tokens, cfg.n_tokens), dtype=bool)

    def patchify(self, x: ad.Tensor) -> ad.Tensor:
        cfg = self.cfg
        B = x.shape[0]
        g, p = cfg.grid, cfg.patch
        x = ad.reshape(x, (B, g, p, g, p, 3))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (B, g * g, p * p * 3))

    def forward(self, x) -> ad.Tensor:
        """Images (float in [0,1]) to final-norm patch tokens."""
        x = ad.as_tensor(x, dtype=self.dtype)
        if x.shape[1:] != (self.cfg.image_size, self.cfg.image_size, 3):
            raise ValueError(f"expected (B,{self.cfg.image_size},{self.cfg.image_size},3), got {x.shape}")
        h = self.patchify(x)
        h = ad.add(layers.linear(self.store, f"{self.prefix}.embed", h),
                   self.store[f"{self.prefix}.pos"])
        for i in range(self.cfg.depth):
            h = layers.block_forward(self.store, f"{self.prefix}.block{i}", h,
                                     self.cfg.heads, self._mask)
        return layers.layer_norm(self.store, f"{self.prefix}.final", h)


class TeacherClassifier:
    """Frozen semantic reference: encoder plus a linear head over the 64
    joint classes. Supplies perceptual/distillation features and grades
    conditional samples."""

    def __init__(self, cfg: EncoderConfig, n_classes: int, rng, dtype=np.float32):
        self.store = ParamStore()
        self.encoder = SemanticEncoder(cfg, rng, dtype, store=self.store, prefix="enc")
        layers.add_linear(self.store, "head", cfg.dim, n_classes, rng, dtype)
        self.n_classes = n_classes

    def logits(self, x) -> ad.Tensor:
        tokens = self.encoder.forward(x)
        pooled = ad.tmean(tokens, axis=1)
        return layers.linear(self.store, "head", pooled)

    def token_features(self, x) -> ad.Tensor:
        return self.encoder.forward(x)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Pooled feature vectors, graph-free."""
        with ad.no_grad():
            return ad.tmean(self.encoder.forward(x), axis=1).data

    def token_features_array(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        """Graph-free token features for a whole array of images."""
        outs = []
        with ad.no_grad():
            for i in range(0, x.shape[0], batch):
                outs.append(self.encoder.forward(x[i:i + batch]).data)
        return np.concatenate(outs, axis=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.logits(x).data, axis=1)

    def accuracy(self, x: np.ndarray, labels: np.ndarray, batch: int = 64) -> float:
        hits = 0
        for i in range(0, len(labels), batch):
            hits += int((self.predict(x[i:i + batch]) == labels[i:i + batch]).sum())
        return hits / len(labels)

    def freeze(self) -> None:
        self.store.set_trainable(False)


class Projection:
    """Residual latent projection: per-token linear down-projection plus a
    pooled skip path, z = W_d f + (W_s mean(f)) broadcast over tokens."""

    def __init__(self, dim: int, d_z: int, rng, dtype=np.float32,
                 store: ParamStore | None = None, prefix: str = "proj"):
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        layers.add_linear(self.store, f"{prefix}.down", dim, d_z, rng, dtype)
        layers.add_linear(self.store, f"{prefix}.skip", dim, d_z, rng, dtype, std=0.02)

    def forward(self, tokens: ad.Tensor) -> ad.Tensor:
        down = layers.linear(self.store, f"{self.prefix}.down", tokens)
        pooled = ad.tmean(tokens, axis=1, keepdims=True)
        skip = layers.linear(self.store, f"{self.prefix}.skip", pooled)
        return ad.add(down, skip)


class PixelDecoder:
    """Latent grid to image: conv stack with one nearest-neighbor 2x upsample.

    d_z channels at (g,g) -> 64 -> upsample -> 32 -> 3 with a sigmoid output,
    so pixels land in (0,1).
    """

    def __init__(self, d_z: int, grid: int, rng, dtype=np.float32,
                 store: ParamStore | None = None, prefix: str = "dec",
                 widths: tuple[int, int] = (64, 32)):
        self.d_z = d_z
        self.grid = grid
        self.prefix = prefix
        self.widths = widths
        self.store = store if store is not None else ParamStore()
        w1, w2 = widths

        def conv_init(cin, cout):
            std = 1.0 / np.sqrt(9 * cin)
            return (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)

        self.store.add(f"{prefix}.c1.w", conv_init(d_z, w1))
        self.store.add(f"{prefix}.c1.b", np.zeros(w1, dtype=dtype))
        self.store.add(f"{prefix}.c2.w", conv_init(w1, w2))
        self.store.add(f"{prefix}.c2.b", np.zeros(w2, dtype=dtype))
        self.store.add(f"{prefix}.c3.w", conv_init(w2, 3))
        self.store.add(f"{prefix}.c3.b", np.zeros(3, dtype=dtype))

    def forward(self, z: ad.Tensor) -> ad.Tensor:
        B, N, dz = z.shape
        if N != self.grid * self.grid or dz != self.d_z:
            raise ValueError(f"decoder expected (B,{self.grid * self.grid},{self.d_z}), got {z.shape}")
        h = ad.reshape(z, (B, self.grid, self.grid, dz))
        p = self.prefix
        h = ad.silu(ad.conv3x3(h, self.store[f"{p}.c1.w"], self.store[f"{p}.c1.b"]))
        h = ad.upsample2x(h)
        h = ad.silu(ad.conv3x3(h, self.store[f"{p}.c2.w"], self.store[f"{p}.c2.b"]))
        return ad.sigmoid(ad.conv3x3(h, self.store[f"{p}.c3.w"], self.store[f"{p}.c3.b"]))


# ------------------------------------------------------------ latent stats


def latent_stats(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all tokens of a batch; std floored at 1e-6.

    Accumulates in float64 regardless of input dtype: single-precision sums
    over tens of thousands of tokens drift enough to leave a visible mean in
    the normalized latents.
    """
    z = np.asarray(z)
    flat = z.reshape(-1, z.shape[-1]).astype(np.float64)
    if flat.shape[0] < 2:
        raise ValueError("latent statistics need at least two token vectors")
    mu = flat.mean(axis=0)
    sigma = np.maximum(flat.std(axis=0), STATS_EPS)
    return mu, sigma


def normalize_latents(z, stats: tuple[np.ndarray, np.ndarray] | None = None):
    """(z - mu) / sigma per channel. With stats=None they are computed from
    the batch and returned; passing stored stats reuses them (required when
    normalizing a single vector). Accepts arrays or graph Tensors."""
    if stats is None:
        if isinstance(z, ad.Tensor):
            raise ValueError("Tensor path requires precomputed stats")
        stats = latent_stats(z)
    mu, sigma = stats
    if isinstance(z, ad.Tensor):
        inv = (1.0 / sigma).astype(np.asarray(mu).dtype)
        return ad.mul(ad.sub(z, ad.as_tensor(mu, dtype=z.dtype)),
                      ad.as_tensor(inv, dtype=z.dtype)), stats
    return ((z - mu) / sigma).astype(np.asarray(z).dtype), stats


def denormalize_latents(z_norm: np.ndarray, stats) -> np.ndarray:
    mu, sigma = stats
    return (np.asarray(z_norm) * sigma + mu).astype(np.asarray(z_norm).dtype)


def inject_noise(z_norm: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Additive Gaussian perturbation in normalized latent space."""
    if sigma < 0:
        raise ValueError("noise level must be >= 0")
    if sigma == 0:
        return np.asarray(z_norm).copy()
    eps = rng.standard_normal(np.asarray(z_norm).shape).astype(np.asarray(z_norm).dtype)
    return z_norm + sigma * eps


# ------------------------------------------------------------- autoencoder


@dataclass
class AutoencoderConfig:
    encoder: EncoderConfig
    d_z: int = 8
    sigma_noise: float = 0.1
    lambda_distill: float = 1.0
    decoder_widths: tuple[int, int] = (64, 32)


class Autoencoder:
    """Encoder + projection + decoder with the two-stage training losses."""

    def __init__(self, cfg: AutoencoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.store = ParamStore()
        self.encoder = SemanticEncoder(cfg.encoder, rng, dtype, store=self.store, prefix="enc")
        self.projection = Projection(cfg.encoder.dim, cfg.d_z, rng, dtype,
                                     store=self.store, prefix="proj")
        self.decoder = PixelDecoder(cfg.d_z, cfg.encoder.grid, rng, dtype,
                                    store=self.store, prefix="dec",
                                    widths=cfg.decoder_widths)
        self.stats: tuple[np.ndarray, np.ndarray] | None = None

    def init_encoder_from_teacher(self, teacher: TeacherClassifier) -> None:
        """Start the trainable encoder at the teacher's weights."""
        state = {k: v for k, v in teacher.store.state_dict().items() if k.startswith("enc.")}
        own = self.store.state_dict()
        own.update({k: v.astype(self.dtype) for k, v in state.items()})
        self.store.load_state_dict(own)

    def encode(self, x) -> ad.Tensor:
        return self.encoder.forward(x)

    def project(self, tokens) -> ad.Tensor:
        return self.projection.forward(tokens)

    def decode(self, z) -> ad.Tensor:
        return self.decoder.forward(ad.as_tensor(z, dtype=self.dtype))

    def latents(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        """Graph-free raw latents for a whole array of images."""
        outs = []
        with ad.no_grad():
            for i in range(0, x.shape[0], batch):
                outs.append(self.project(self.encode(x[i:i + batch])).data)
        return np.concatenate(outs, axis=0)

    def reconstruct(self, x: np.ndarray, batch: int = 64) -> np.ndarray:
        """Autoencode a batch the way the decoder was trained: on raw latents
        before stage 2, on normalized latents once stats are frozen."""
        outs = []
        with ad.no_grad():
            for i in range(0, x.shape[0], batch):
                z = self.project(self.encode(x[i:i + batch])).data
                if self.stats is not None:
                    z, _ = normalize_latents(z, self.stats)
                outs.append(self.decode(z).data)
        return np.concatenate(outs, axis=0)

    def freeze_semantic(self, include_projection: bool = True) -> None:
        self.store.set_trainable(False, prefix="enc.")
        if include_projection:
            self.store.set_trainable(False, prefix="proj.")

    def stage1_loss(self, x: np.ndarray, teacher: TeacherClassifier,
                    t_x: np.ndarray | None = None):
        """Reconstruction + perceptual + distillation. Returns (loss, parts).

        t_x optionally supplies the teacher's token features of x (they are
        constant for a frozen teacher, so training loops precompute them
        once per dataset instead of once per step).
        """
        xt = ad.as_tensor(x, dtype=self.dtype)
        tokens = self.encode(xt)
        recon = self.decode(self.project(tokens))
        rec = ad.tmean(ad.square(ad.sub(recon, xt)))
        if t_x is None:
            with ad.no_grad():
                t_x = teacher.token_features(xt).data
        t_rec = teacher.token_features(recon)
        perc = ad.tmean(ad.square(ad.sub(t_rec, ad.as_tensor(t_x))))
        dist = ad.tmean(ad.square(ad.sub(tokens, ad.as_tensor(t_x))))
        lam = self.cfg.lambda_distill
        total = ad.add(ad.add(rec, perc), ad.mul(dist, lam))
        parts = {"rec_mse": rec.item(), "perceptual": perc.item(),
                 "distill": dist.item(), "lambda_distill": lam}
        return total, parts

    def stage2_loss(self, x: np.ndarray, teacher: TeacherClassifier, rng,
                    sigma: float | None = None, t_x: np.ndarray | None = None,
                    z_norm: np.ndarray | None = None):
        """Decoder loss through frozen encoder, normalized + noised latents.

        Requires frozen encoder parameters and precomputed latent stats; the
        perturbation is drawn from rng outside the graph. t_x optionally
        supplies precomputed teacher features of x, as in stage1_loss, and
        z_norm the precomputed normalized latents of x — both are constant
        through this stage, so training loops compute them once per dataset.
        """
        enc_trainable = [p for p in self.store.trainable() if p.name.startswith("enc.")]
        if enc_trainable:
            raise ValueError("stage-2 loss requires a frozen encoder "
                             f"({len(enc_trainable)} encoder params still trainable)")
        if self.stats is None:
            raise ValueError("stage-2 loss requires latent stats; call set_stats first")
        if sigma is None:
            sigma = self.cfg.sigma_noise
        xt = ad.as_tensor(x, dtype=self.dtype)
        if z_norm is None:
            z = self.project(self.encode(xt))
            z_norm, _ = normalize_latents(z, self.stats)
        else:
            if any(p.name.startswith("proj.") for p in self.store.trainable()):
                raise ValueError("precomputed latents require a frozen projection")
            z_norm = ad.as_tensor(z_norm, dtype=self.dtype)
        eps = rng.standard_normal(z_norm.shape).astype(self.dtype)
        z_noisy = ad.add(z_norm, ad.as_tensor(sigma * eps, dtype=self.dtype))
        recon = self.decode(z_noisy)
        rec = ad.tmean(ad.square(ad.sub(recon, xt)))
        if t_x is None:
            with ad.no_grad():
                t_x = teacher.token_features(xt).data
        t_rec = teacher.token_features(recon)
        perc = ad.tmean(ad.square(ad.sub(t_rec, ad.as_tensor(t_x))))
        total = ad.add(rec, perc)
        parts = {"rec_mse": rec.item(), "perceptual": perc.item(), "sigma": sigma}
        return total, parts

    def set_stats(self, images: np.ndarray, batch: int = 64) -> None:
        """Freeze per-channel latent stats measured over a training set.

        Accumulation happens in float64; the frozen copies live in the model
        dtype so normalization never promotes the graph (and survives the
        float32 checkpoint round trip bit for bit)."""
        mu, sigma = latent_stats(self.latents(images, batch))
        self.stats = (mu.astype(self.dtype), sigma.astype(self.dtype))
