"""Optimization and training: AdamW, cosine schedule, EMA, binary
checkpoints, CSV metric logs, and the four training entry points (teacher
pretraining, tokenizer stages 1 and 2, autoregressive + flow training).

Everything here is deterministic given a TrainConfig: every random stream is
seeded from `cfg.seed` plus a fixed per-purpose tag, the loops are
single-threaded, and metric logs write `wall_ms = 0` by default so reruns
byte-match.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
import time

import numpy as np

from . import autodiff as ad
from . import armodel as arm
from . import data
from . import flowhead as fh
from . import tokenizer as tok
from .config import TrainConfig

__all__ = [
    "MissingArtifactError", "CheckpointError",
    "AdamW", "cosine_lr", "ema_update", "EmaState",
    "save_checkpoint", "load_checkpoint", "MetricLog",
    "encoder_config", "autoencoder_config", "ar_config", "flow_config",
    "dataset_arrays",
    "train_teacher", "save_teacher", "load_teacher",
    "train_ae", "save_ae", "load_ae",
    "train_ar", "save_ar", "load_ar",
]


class MissingArtifactError(FileNotFoundError):
    """A required input file (checkpoint, dataset, config) does not exist."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or fail their checksum."""


# -------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    Decay multiplies the pre-update parameter by (1 - lr * wd), separate from
    the gradient step, so a zero-gradient parameter still shrinks by exactly
    that factor.
    """

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.95,
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameters must have unique names")
        self.beta1, self.beta2 = float(beta1), float(beta2)
        self.weight_decay, self.eps = float(weight_decay), float(eps)
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise ad.NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            if lr == 0.0:
                continue
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data[...] = p.data * (1.0 - lr * self.weight_decay) - update

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


def cosine_lr(step: int, total: int, base_lr: float = 2e-4, warmup: int = 0) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at `total`."""
    if not 0 <= step <= total:
        raise ValueError(f"step must be in [0, {total}], got {step}")
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    span = max(total - warmup, 1)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def ema_update(shadow: dict, params, decay: float) -> dict:
    """In-place exponential moving average: e <- d*e + (1-d)*p."""
    d = float(decay)
    for p in params:
        e = shadow[p.name]
        e *= d
        e += (1.0 - d) * p.data
    return shadow


class EmaState:
    """Shadow copies of parameters, smoothed with a fixed decay."""

    def __init__(self, params, decay: float):
        self.decay = float(decay)
        self.params = list(params)
        self.shadow = {p.name: p.data.copy() for p in self.params}

    def update(self) -> None:
        ema_update(self.shadow, self.params, self.decay)

    def copy_to(self, params) -> None:
        for p in params:
            p.data[...] = self.shadow[p.name]


# ------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"VGTK"
CKPT_VERSION = 1


def save_checkpoint(path: str, tensors: dict) -> None:
    """Write named float32 tensors: magic, version, records, 64-bit checksum.

    Record layout per tensor (all integers little-endian uint32): name
    length, name bytes (UTF-8), rank, one dim per axis, then the row-major
    float32 payload. Records are sorted by name so identical contents always
    produce identical bytes. The trailing 8 bytes are a BLAKE2b-64 digest of
    everything before them.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    digest = hashlib.blake2b(body, digest_size=8).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh_:
        fh_.write(body + digest)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint back into {name: float32 array}; validates checksum."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing checkpoint: {path}")
    with open(path, "rb") as fh_:
        blob = fh_.read()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict = {}
    pos = 8
    end = len(body)
    try:
        while pos < end:
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            tensors[name] = arr.reshape(dims).copy()
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed record stream ({exc})") from None
    if pos != end:
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return tensors


def _meta(records: dict) -> dict:
    return {k[len("meta."):]: float(v) for k, v in records.items()
            if k.startswith("meta.")}


# ------------------------------------------------------------ metric logs


class MetricLog:
    """CSV training log: `step,loss_total,<components>,lr,wall_ms`.

    With deterministic=True the wall_ms column is written as 0 so identical
    runs produce byte-identical files; otherwise it is elapsed milliseconds
    since the log was opened.
    """

    def __init__(self, path: str | None, components, deterministic: bool = True):
        self.path = path
        self.components = list(components)
        self.deterministic = deterministic
        self._fh = None
        self._t0 = time.monotonic()
        if path is not None:
            self._fh = open(path, "w", encoding="utf-8", newline="")
            header = ",".join(["step", "loss_total", *self.components, "lr", "wall_ms"])
            self._fh.write(header + "\n")

    def log(self, step: int, loss_total: float, parts: dict, lr: float) -> None:
        if self._fh is None:
            return
        wall = 0 if self.deterministic else int((time.monotonic() - self._t0) * 1000)
        cells = [str(step), format(float(loss_total), ".10g")]
        cells += [format(float(parts[c]), ".10g") for c in self.components]
        cells += [format(float(lr), ".10g"), str(wall)]
        self._fh.write(",".join(cells) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _should_log(step: int, total: int, every: int) -> bool:
    return step % every == 0 or step == total - 1


# ---------------------------------------------------------- model builders


def encoder_config(cfg: TrainConfig) -> tok.EncoderConfig:
    return tok.EncoderConfig(image_size=cfg.image_size, patch=cfg.patch_size,
                             dim=cfg.d_model, depth=cfg.n_layers, heads=cfg.n_heads)


def autoencoder_config(cfg: TrainConfig) -> tok.AutoencoderConfig:
    return tok.AutoencoderConfig(encoder=encoder_config(cfg), d_z=cfg.d_z,
                                 sigma_noise=cfg.sigma_noise,
                                 lambda_distill=cfg.lambda_distill)


def ar_config(cfg: TrainConfig) -> arm.ARConfig:
    n_tokens = (cfg.image_size // cfg.patch_size) ** 2
    return arm.ARConfig(n_tokens=n_tokens, d_z=cfg.d_z, d_model=cfg.ar_d_model,
                        depth=cfg.ar_n_layers, heads=cfg.ar_n_heads,
                        n_cond=data.N_CLASSES)


def flow_config(cfg: TrainConfig) -> fh.FlowConfig:
    return fh.FlowConfig(d_z=cfg.d_z, d_cond=cfg.ar_d_model, width=cfg.flow_width,
                         hidden_layers=cfg.flow_hidden_layers, time_dim=cfg.time_dim)


def dataset_arrays(ds: data.ShapeDataset):
    """(images float32, joint class ids int64) view of a dataset."""
    return ds.images, ds.class_ids


# ----------------------------------------------------------- entry points


def _attribute_accuracy(teacher: tok.TeacherClassifier, x: np.ndarray,
                        ds: data.ShapeDataset) -> dict:
    pred = np.concatenate([teacher.predict(x[i:i + 64]) for i in range(0, len(x), 64)])
    sh, co, po = data.decompose_class(pred)
    return {
        "val_acc": float(np.mean(pred == ds.class_ids)),
        "val_acc_shape": float(np.mean(sh == ds.shape_ids)),
        "val_acc_color": float(np.mean(co == ds.color_ids)),
        "val_acc_position": float(np.mean(po == ds.pos_ids)),
    }


def train_teacher(train_ds: data.ShapeDataset, val_ds: data.ShapeDataset,
                  cfg: TrainConfig, log_path: str | None = None):
    """Train the joint-label classifier whose frozen encoder anchors the
    tokenizer. Returns (teacher, info dict with val accuracies)."""
    x, y = dataset_arrays(train_ds)
    teacher = tok.TeacherClassifier(encoder_config(cfg), data.N_CLASSES,
                                    np.random.default_rng([cfg.seed, 1]))
    opt = AdamW(teacher.store.trainable(), cfg.beta1, cfg.beta2,
                cfg.weight_decay, cfg.adam_eps)
    rng_batch = np.random.default_rng([cfg.seed, 2])
    steps = cfg.teacher_steps
    with MetricLog(log_path, ["loss_ce"], cfg.deterministic_logs) as log:
        for step in range(steps):
            lr = cosine_lr(step, steps, cfg.teacher_lr, cfg.warmup)
            total = 0.0
            for _ in range(cfg.grad_accum):
                idx = rng_batch.integers(0, len(y), cfg.teacher_batch_size)
                loss = ad.cross_entropy(teacher.logits(x[idx]), y[idx])
                ad.backward(loss)
                total += loss.item() / cfg.grad_accum
            opt.step(lr)
            opt.zero_grad()
            if _should_log(step, steps, cfg.log_every):
                log.log(step, total, {"loss_ce": total}, lr)
    info = _attribute_accuracy(teacher, val_ds.images, val_ds)
    info["steps"] = steps
    return teacher, info


def save_teacher(path: str, teacher: tok.TeacherClassifier, info: dict | None = None) -> None:
    cfg = teacher.encoder.cfg
    records = dict(teacher.store.state_dict())
    records.update({
        "meta.image_size": np.float32(cfg.image_size),
        "meta.patch": np.float32(cfg.patch),
        "meta.dim": np.float32(cfg.dim),
        "meta.depth": np.float32(cfg.depth),
        "meta.heads": np.float32(cfg.heads),
        "meta.mlp_ratio": np.float32(cfg.mlp_ratio),
        "meta.n_classes": np.float32(teacher.n_classes),
    })
    for key, value in (info or {}).items():
        records[f"meta.{key}"] = np.float32(value)
    save_checkpoint(path, records)


def load_teacher(path: str):
    """Rebuild a teacher from its checkpoint. Returns (teacher, meta)."""
    records = load_checkpoint(path)
    meta = _meta(records)
    enc_cfg = tok.EncoderConfig(image_size=int(meta["image_size"]), patch=int(meta["patch"]),
                                dim=int(meta["dim"]), depth=int(meta["depth"]),
                                heads=int(meta["heads"]), mlp_ratio=int(meta["mlp_ratio"]))
    teacher = tok.TeacherClassifier(enc_cfg, int(meta["n_classes"]),
                                    np.random.default_rng(0))
    teacher.store.load_state_dict({k: v for k, v in records.items()
                                   if not k.startswith("meta.")})
    return teacher, meta


def train_ae(train_ds: data.ShapeDataset, stage: int, cfg: TrainConfig,
             teacher: tok.TeacherClassifier, ae: tok.Autoencoder | None = None,
             log_path: str | None = None, steps: int | None = None,
             sigma: float | None = None):
    """Tokenizer training. Stage 1 builds a fresh autoencoder (encoder
    initialized from the teacher) and trains everything; stage 2 takes the
    stage-1 autoencoder, freezes encoder (+projection unless configured
    otherwise) and stats, and fits the decoder on noisy normalized latents.
    Returns (ae, info)."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    x, _ = dataset_arrays(train_ds)
    teacher.freeze()
    if stage == 1:
        if ae is None:
            ae = tok.Autoencoder(autoencoder_config(cfg), np.random.default_rng([cfg.seed, 3]))
            ae.init_encoder_from_teacher(teacher)
        components = ["loss_rec", "loss_percep", "loss_distill"]
        if steps is None:
            steps = cfg.ae1_steps
    else:
        if ae is None:
            raise ValueError("stage 2 needs the stage-1 autoencoder")
        ae.set_stats(x)
        ae.freeze_semantic(include_projection=not cfg.stage2_train_projection)
        components = ["loss_rec", "loss_percep"]
        if steps is None:
            steps = cfg.ae2_steps
    opt = AdamW(ae.store.trainable(), cfg.beta1, cfg.beta2,
                cfg.weight_decay, cfg.adam_eps)
    rng_batch = np.random.default_rng([cfg.seed, 4, stage])
    rng_noise = np.random.default_rng([cfg.seed, 5])
    # The teacher is frozen, so its features of the clean training images
    # never change; likewise the stage-2 latents once encoder + projection
    # are frozen. Precompute both instead of recomputing every step.
    t_feats = teacher.token_features_array(x)
    z_frozen = None
    if stage == 2 and not any(p.name.startswith("proj.")
                              for p in ae.store.trainable()):
        z_frozen, _ = tok.normalize_latents(ae.latents(x), ae.stats)
    last_parts: dict = {}
    with MetricLog(log_path, components, cfg.deterministic_logs) as log:
        for step in range(steps):
            lr = cosine_lr(step, steps, cfg.lr, cfg.warmup)
            total = 0.0
            acc_parts = {c: 0.0 for c in components}
            for _ in range(cfg.grad_accum):
                idx = rng_batch.integers(0, x.shape[0], cfg.batch_size)
                if stage == 1:
                    loss, parts = ae.stage1_loss(x[idx], teacher, t_x=t_feats[idx])
                    micro = {"loss_rec": parts["rec_mse"],
                             "loss_percep": parts["perceptual"],
                             "loss_distill": parts["distill"]}
                else:
                    z_rows = None if z_frozen is None else z_frozen[idx]
                    loss, parts = ae.stage2_loss(x[idx], teacher, rng_noise,
                                                 sigma=sigma, t_x=t_feats[idx],
                                                 z_norm=z_rows)
                    micro = {"loss_rec": parts["rec_mse"],
                             "loss_percep": parts["perceptual"]}
                ad.backward(loss)
                total += loss.item() / cfg.grad_accum
                for c in components:
                    acc_parts[c] += micro[c] / cfg.grad_accum
            opt.step(lr)
            opt.zero_grad()
            last_parts = acc_parts
            if _should_log(step, steps, cfg.log_every):
                log.log(step, total, acc_parts, lr)
    info = {"steps": steps, "stage": stage, **last_parts}
    return ae, info


def save_ae(path: str, ae: tok.Autoencoder, stage: int, extra: dict | None = None) -> None:
    enc = ae.cfg.encoder
    records = dict(ae.store.state_dict())
    records.update({
        "meta.image_size": np.float32(enc.image_size),
        "meta.patch": np.float32(enc.patch),
        "meta.dim": np.float32(enc.dim),
        "meta.depth": np.float32(enc.depth),
        "meta.heads": np.float32(enc.heads),
        "meta.mlp_ratio": np.float32(enc.mlp_ratio),
        "meta.d_z": np.float32(ae.cfg.d_z),
        "meta.dec_w0": np.float32(ae.cfg.decoder_widths[0]),
        "meta.dec_w1": np.float32(ae.cfg.decoder_widths[1]),
        "meta.sigma_noise": np.float32(ae.cfg.sigma_noise),
        "meta.lambda_distill": np.float32(ae.cfg.lambda_distill),
        "meta.stage": np.float32(stage),
    })
    if ae.stats is not None:
        records["stats.mu"] = ae.stats[0].astype(np.float32)
        records["stats.sigma"] = ae.stats[1].astype(np.float32)
    for key, value in (extra or {}).items():
        records[f"meta.{key}"] = np.float32(value)
    save_checkpoint(path, records)


def _ae_from_records(records: dict):
    meta = _meta(records)
    enc_cfg = tok.EncoderConfig(image_size=int(meta["image_size"]), patch=int(meta["patch"]),
                                dim=int(meta["dim"]), depth=int(meta["depth"]),
                                heads=int(meta["heads"]), mlp_ratio=int(meta["mlp_ratio"]))
    ae_cfg = tok.AutoencoderConfig(encoder=enc_cfg, d_z=int(meta["d_z"]),
                                   sigma_noise=meta["sigma_noise"],
                                   lambda_distill=meta["lambda_distill"],
                                   decoder_widths=(int(meta["dec_w0"]), int(meta["dec_w1"])))
    ae = tok.Autoencoder(ae_cfg, np.random.default_rng(0))
    ae.store.load_state_dict({k: v for k, v in records.items()
                              if k.split(".")[0] in ("enc", "proj", "dec")})
    if "stats.mu" in records:
        ae.stats = (records["stats.mu"], records["stats.sigma"])
    return ae, meta


def load_ae(path: str):
    """Rebuild an autoencoder (and its frozen stats, if stage 2) from disk."""
    records = load_checkpoint(path)
    return _ae_from_records(records)


def train_ar(train_ds: data.ShapeDataset, ae: tok.Autoencoder, cfg: TrainConfig,
             backbone: arm.ARBackbone | None = None, head: fh.FlowHead | None = None,
             steps: int | None = None, lr: float | None = None,
             log_path: str | None = None):
    """Position-query autoregressive training over frozen normalized latents.

    Per step: sample a batch and one token order per image, run the backbone
    over the interleaved layout under the causal mask, and regress the flow
    head's velocity on every query row. The logged loss_total is the
    flow-matching error summed over the N target slots (batch-averaged).
    Returns (backbone, head, ema, info).
    """
    if ae.stats is None:
        raise ValueError("AR training requires a stage-2 autoencoder with frozen stats")
    x, labels = dataset_arrays(train_ds)
    z_norm, _ = tok.normalize_latents(ae.latents(x), ae.stats)
    if backbone is None:
        backbone = arm.ARBackbone(ar_config(cfg), np.random.default_rng([cfg.seed, 6]))
    if head is None:
        head = fh.FlowHead(flow_config(cfg), np.random.default_rng([cfg.seed, 7]))
    params = list(backbone.store.trainable()) + list(head.store.trainable())
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps)
    ema = EmaState(params, cfg.ema_decay)
    rng_batch = np.random.default_rng([cfg.seed, 8])
    rng_perm = np.random.default_rng([cfg.seed, 9])
    rng_fm = np.random.default_rng([cfg.seed, 10])
    n_img = x.shape[0]
    N = backbone.cfg.n_tokens
    d_z = backbone.cfg.d_z
    base_lr = cfg.lr if lr is None else lr
    if steps is None:
        steps = cfg.ar_steps
    total = float("nan")
    with MetricLog(log_path, ["loss_fm"], cfg.deterministic_logs) as log:
        for step in range(steps):
            lr_t = cosine_lr(step, steps, base_lr, cfg.warmup)
            total = 0.0
            fm_mean = 0.0
            for _ in range(cfg.grad_accum):
                idx = rng_batch.integers(0, n_img, cfg.ar_batch_size)
                B = idx.shape[0]
                perms = np.stack([arm.sample_permutation(N, rng_perm) for _ in range(B)])
                z_gen = np.take_along_axis(z_norm[idx], perms[:, :, None], axis=1)
                hidden = backbone.training_hidden(z_gen, perms, labels[idx])
                h2 = ad.reshape(hidden, (B * N, backbone.cfg.d_model))
                row_loss, parts = fh.fm_loss(head, z_gen.reshape(B * N, d_z), h2,
                                             rng_fm, shift_tokens=cfg.flow_shift_dim)
                loss = ad.mul(row_loss, float(N))
                ad.backward(loss)
                total += loss.item() / cfg.grad_accum
                fm_mean += parts["fm"] / cfg.grad_accum
            opt.step(lr_t)
            ema.update()
            opt.zero_grad()
            if _should_log(step, steps, cfg.log_every):
                log.log(step, total, {"loss_fm": fm_mean}, lr_t)
    info = {"steps": steps, "final_loss": total, "base_lr": base_lr}
    return backbone, head, ema, info


def save_ar(path: str, ae: tok.Autoencoder, backbone: arm.ARBackbone,
            head: fh.FlowHead, ema: EmaState | None, cfg: TrainConfig,
            extra: dict | None = None) -> None:
    """Bundle everything sampling needs: backbone + flow head (raw and EMA),
    the stage-2 tokenizer, its stats, and the architecture metadata."""
    records = dict(backbone.store.state_dict())
    records.update(head.store.state_dict())
    if ema is not None:
        records.update({f"ema.{k}": v for k, v in ema.shadow.items()})
    ae_records = dict(ae.store.state_dict())
    if ae.stats is None:
        raise ValueError("AR checkpoint requires tokenizer stats")
    ae_records["stats.mu"] = ae.stats[0].astype(np.float32)
    ae_records["stats.sigma"] = ae.stats[1].astype(np.float32)
    records.update(ae_records)
    enc = ae.cfg.encoder
    records.update({
        "meta.image_size": np.float32(enc.image_size),
        "meta.patch": np.float32(enc.patch),
        "meta.dim": np.float32(enc.dim),
        "meta.depth": np.float32(enc.depth),
        "meta.heads": np.float32(enc.heads),
        "meta.mlp_ratio": np.float32(enc.mlp_ratio),
        "meta.d_z": np.float32(ae.cfg.d_z),
        "meta.dec_w0": np.float32(ae.cfg.decoder_widths[0]),
        "meta.dec_w1": np.float32(ae.cfg.decoder_widths[1]),
        "meta.sigma_noise": np.float32(ae.cfg.sigma_noise),
        "meta.lambda_distill": np.float32(ae.cfg.lambda_distill),
        "meta.stage": np.float32(2),
        "meta.ar_d_model": np.float32(backbone.cfg.d_model),
        "meta.ar_depth": np.float32(backbone.cfg.depth),
        "meta.ar_heads": np.float32(backbone.cfg.heads),
        "meta.ar_mlp_ratio": np.float32(backbone.cfg.mlp_ratio),
        "meta.n_cond": np.float32(backbone.cfg.n_cond),
        "meta.flow_width": np.float32(head.cfg.width),
        "meta.flow_hidden_layers": np.float32(head.cfg.hidden_layers),
        "meta.time_dim": np.float32(head.cfg.time_dim),
        "meta.flow_shift_dim": np.float32(cfg.flow_shift_dim),
    })
    for key, value in (extra or {}).items():
        records[f"meta.{key}"] = np.float32(value)
    save_checkpoint(path, records)


def load_ar(path: str, use_ema: bool = True):
    """Rebuild (ae, backbone, head, meta) from an AR checkpoint.

    use_ema=True loads the EMA weights into the backbone and head (the raw
    weights are still in the file); use_ema=False loads the raw weights.
    """
    records = load_checkpoint(path)
    meta = _meta(records)
    ae, _ = _ae_from_records(records)
    n_tokens = (int(meta["image_size"]) // int(meta["patch"])) ** 2
    ar_cfg = arm.ARConfig(n_tokens=n_tokens, d_z=int(meta["d_z"]),
                          d_model=int(meta["ar_d_model"]), depth=int(meta["ar_depth"]),
                          heads=int(meta["ar_heads"]), mlp_ratio=int(meta["ar_mlp_ratio"]),
                          n_cond=int(meta["n_cond"]))
    backbone = arm.ARBackbone(ar_cfg, np.random.default_rng(0))
    fl_cfg = fh.FlowConfig(d_z=int(meta["d_z"]), d_cond=int(meta["ar_d_model"]),
                           width=int(meta["flow_width"]),
                           hidden_layers=int(meta["flow_hidden_layers"]),
                           time_dim=int(meta["time_dim"]))
    head = fh.FlowHead(fl_cfg, np.random.default_rng(0))
    prefix = "ema." if use_ema and any(k.startswith("ema.") for k in records) else ""
    backbone.store.load_state_dict({k: records[prefix + k]
                                    for k in backbone.store.names()})
    head.store.load_state_dict({k: records[prefix + k] for k in head.store.names()})
    return ae, backbone, head, meta
