"""Finite-difference verification of every backward pass, in 64-bit.

The suite builds nano-scale models (single block, few channels) so that
checking every coordinate with central differences stays fast, then runs
named cases at two levels: one per differentiable op, and one per training
loss (stage-1, stage-2, flow matching). Each case reports its max relative
error |analytic − numeric| / max(1, |analytic|, |numeric|); the suite
passes when every case is below tolerance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import armodel as arm
from . import flowhead as fh
from . import layers
from . import tokenizer as tok

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    n_coords: int

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_err < tol


def _p(rng, shape, name, scale=0.5):
    return ad.param((rng.standard_normal(shape) * scale).astype(np.float64), name)


# ------------------------------------------------------------- op cases
# Each builder returns (f, params): f rebuilds the float64 graph and
# returns the scalar loss Tensor.


def _case_matmul(rng):
    a = _p(rng, (3, 4), "a")
    b = _p(rng, (4, 5), "b")
    c = _p(rng, (5, 2), "c")

    def f():
        return ad.tsum(ad.square(ad.matmul(ad.matmul(a, b), c)))

    return f, [a, b, c]


def _case_layer_norm(rng):
    x = _p(rng, (2, 3, 6), "x")
    gamma = _p(rng, (6,), "gamma", 1.0)
    beta = _p(rng, (6,), "beta", 1.0)

    def f():
        return ad.tsum(ad.square(ad.layer_norm(x, gamma, beta)))

    return f, [x, gamma, beta]


def _case_silu(rng):
    x = _p(rng, (4, 7), "x", 2.0)

    def f():
        return ad.tsum(ad.square(ad.silu(x)))

    return f, [x]


def _case_sigmoid(rng):
    x = _p(rng, (4, 7), "x", 2.0)

    def f():
        return ad.tsum(ad.square(ad.sigmoid(x)))

    return f, [x]


def _case_attention(rng):
    # Fused masked self-attention, causal mask (exercises the masked
    # softmax path).
    T, heads, dh = 5, 2, 3
    d = heads * dh
    qkv = _p(rng, (2, T, 3 * d), "qkv")
    mask = np.tril(np.ones((T, T), dtype=bool))

    def f():
        return ad.tsum(ad.square(ad.self_attention(qkv, heads, mask,
                                                   1.0 / np.sqrt(dh))))

    return f, [qkv]


def _case_attention_open(rng):
    # Unmasked softmax path of the same op.
    T, heads, dh = 4, 2, 3
    d = heads * dh
    qkv = _p(rng, (2, T, 3 * d), "qkv")
    mask = np.ones((T, T), dtype=bool)

    def f():
        return ad.tsum(ad.square(ad.self_attention(qkv, heads, mask,
                                                   1.0 / np.sqrt(dh))))

    return f, [qkv]


def _case_conv3x3(rng):
    x = _p(rng, (2, 5, 5, 3), "x")
    w = _p(rng, (3, 3, 3, 4), "w")
    b = _p(rng, (4,), "b", 1.0)

    def f():
        return ad.tsum(ad.square(ad.conv3x3(x, w, b)))

    return f, [x, w, b]


def _case_upsample(rng):
    x = _p(rng, (2, 3, 3, 4), "x")

    def f():
        return ad.tsum(ad.square(ad.upsample2x(x)))

    return f, [x]


def _case_cross_entropy(rng):
    logits = _p(rng, (6, 5), "logits", 2.0)
    labels = rng.integers(0, 5, 6)

    def f():
        return ad.cross_entropy(logits, labels)

    return f, [logits]


def _case_composed_chain(rng):
    # matmul -> layer_norm -> attention -> matmul, the backbone skeleton.
    T, heads, dh = 4, 2, 2
    d = heads * dh
    x = _p(rng, (2, T, d), "x")
    w_in = _p(rng, (d, 3 * d), "w_in")
    gamma = _p(rng, (d,), "gamma", 1.0)
    beta = _p(rng, (d,), "beta", 1.0)
    w_out = _p(rng, (d, d), "w_out")
    mask = np.tril(np.ones((T, T), dtype=bool))

    def f():
        h = ad.layer_norm(x, gamma, beta)
        qkv = ad.reshape(ad.matmul(ad.reshape(h, (-1, d)), w_in), (2, T, 3 * d))
        att = ad.self_attention(qkv, heads, mask, 1.0 / np.sqrt(dh))
        out = ad.matmul(ad.reshape(att, (-1, d)), w_out)
        return ad.tsum(ad.square(out))

    return f, [x, w_in, gamma, beta, w_out]


# ----------------------------------------------------------- loss cases


def _nano_autoencoder(rng_seed: int = 0):
    enc = tok.EncoderConfig(image_size=8, patch=2, dim=12, depth=1, heads=2,
                            mlp_ratio=2)
    cfg = tok.AutoencoderConfig(encoder=enc, d_z=3, sigma_noise=0.1,
                                lambda_distill=1.0, decoder_widths=(6, 5))
    rng = np.random.default_rng(rng_seed)
    teacher = tok.TeacherClassifier(enc, n_classes=5, rng=rng, dtype=np.float64)
    teacher.freeze()
    ae = tok.Autoencoder(cfg, np.random.default_rng(rng_seed + 1),
                         dtype=np.float64)
    x = np.random.default_rng(rng_seed + 2).uniform(size=(2, 8, 8, 3))
    return teacher, ae, x


def _case_stage1_loss(rng):
    teacher, ae, x = _nano_autoencoder(int(rng.integers(1 << 30)))
    # The teacher is frozen, so its features are constant across FD evals.
    t_x = teacher.token_features_array(x)

    def f():
        loss, _ = ae.stage1_loss(x, teacher, t_x=t_x)
        return loss

    return f, ae.store.trainable()


def _case_stage2_loss(rng):
    seed = int(rng.integers(1 << 30))
    teacher, ae, x = _nano_autoencoder(seed)
    ae.set_stats(x)
    ae.freeze_semantic(include_projection=True)
    t_x = teacher.token_features_array(x)
    z_norm, _ = tok.normalize_latents(ae.latents(x), ae.stats)

    def f():
        # Fresh identically-seeded rng per call keeps f deterministic.
        loss, _ = ae.stage2_loss(x, teacher, np.random.default_rng(seed + 3),
                                 t_x=t_x, z_norm=z_norm)
        return loss

    return f, ae.store.trainable()


def _case_fm_loss(rng):
    seed = int(rng.integers(1 << 30))
    acfg = arm.ARConfig(n_tokens=4, d_z=3, d_model=12, depth=1, heads=2,
                        mlp_ratio=2, n_cond=5)
    fcfg = fh.FlowConfig(d_z=3, d_cond=12, width=10, hidden_layers=1,
                         time_dim=6)
    backbone = arm.ARBackbone(acfg, np.random.default_rng(seed),
                              dtype=np.float64)
    head = fh.FlowHead(fcfg, np.random.default_rng(seed + 1),
                       dtype=np.float64)
    gen = np.random.default_rng(seed + 2)
    B, N = 2, acfg.n_tokens
    z = gen.standard_normal((B, N, acfg.d_z))
    perms = np.stack([arm.sample_permutation(N, gen) for _ in range(B)])
    cond = gen.integers(0, acfg.n_cond, B)
    z_gen = np.take_along_axis(z, perms[:, :, None], axis=1)
    draws = (gen.uniform(size=B * N), gen.standard_normal((B * N, acfg.d_z)))

    def f():
        hidden = backbone.training_hidden(z_gen, perms, cond)
        h2 = ad.reshape(hidden, (B * N, acfg.d_model))
        loss, _ = fh.fm_loss(head, z_gen.reshape(B * N, acfg.d_z), h2,
                             rng=None, shift_tokens=12, draws=draws)
        return loss

    params = backbone.store.trainable() + head.store.trainable()
    return f, params


CASES = [
    ("matmul", _case_matmul),
    ("layer_norm", _case_layer_norm),
    ("silu", _case_silu),
    ("sigmoid", _case_sigmoid),
    ("attention_masked", _case_attention),
    ("attention_open", _case_attention_open),
    ("conv3x3", _case_conv3x3),
    ("upsample2x", _case_upsample),
    ("cross_entropy", _case_cross_entropy),
    ("composed_chain", _case_composed_chain),
    ("stage1_loss", _case_stage1_loss),
    ("stage2_loss", _case_stage2_loss),
    ("fm_loss", _case_fm_loss),
]


def run_suite(h: float = STEP, names: list[str] | None = None,
              seed: int = 0) -> list[CheckResult]:
    """Run the (selected) cases; returns one CheckResult per case."""
    results = []
    for name, builder in CASES:
        if names is not None and name not in names:
            continue
        f, params = builder(np.random.default_rng([seed, hash(name) % (1 << 30)]))
        err, _ = ad.grad_check(f, params, h=h)
        n = sum(p.data.size for p in params)
        results.append(CheckResult(name=name, max_rel_err=err, n_coords=n))
    return results


def format_report(results: list[CheckResult], tol: float = TOLERANCE) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed(tol) else "FAIL"
        lines.append(f"{r.name:<18} max_rel_err {r.max_rel_err:.3e}  "
                     f"({r.n_coords} coords)  {status}")
    worst = max((r.max_rel_err for r in results), default=0.0)
    ok = all(r.passed(tol) for r in results)
    lines.append(f"{'overall':<18} max_rel_err {worst:.3e}  "
                 f"{'PASS' if ok else 'FAIL'} (tolerance {tol:g})")
    return "\n".join(lines)
