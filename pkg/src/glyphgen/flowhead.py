"""Flow-matching head over latent channels.

A small MLP predicts the straight-path velocity that carries Gaussian noise
to a target latent, conditioned on a backbone hidden state and a sinusoidal
time embedding. Training regresses the velocity at a shifted random time;
sampling integrates the learned field with an explicit Euler scheme on the
same shifted grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .layers import ParamStore

SHIFT_REF = 4096


def shift_timestep(t, m: int, n: int = SHIFT_REF):
    """Resolution-aware time warp t -> a t / (1 + (a-1) t), a = sqrt(m/n).

    Fewer tokens (m < n) push sampling time toward 0 where the path is
    noisier. Identity when m == n; endpoints are fixed points.
    """
    if m < 1 or n < 1:
        raise ValueError("token counts must be >= 1")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValueError("timestep must lie in [0, 1]")
    alpha = np.sqrt(m / n)
    out = np.clip(alpha * t_arr / (1.0 + (alpha - 1.0) * t_arr), 0.0, 1.0)
    # Both endpoints are fixed points of the exact map, but the rounded
    # denominator can land the t=1 image an ulp under 1, so pin it.
    out = np.where(t_arr == 1.0, 1.0, out)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


@dataclass
class FlowConfig:
    d_z: int = 8
    d_cond: int = 128
    width: int = 256
    hidden_layers: int = 3
    time_dim: int = 64


class FlowHead:
    """MLP velocity field v(z_t, t, h): concat inputs, silu hiddens."""

    def __init__(self, cfg: FlowConfig, rng, dtype=np.float32,
                 store: ParamStore | None = None, prefix: str = "flow"):
        self.cfg = cfg
        self.dtype = dtype
        self.prefix = prefix
        self.store = store if store is not None else ParamStore()
        d_in = cfg.d_z + cfg.time_dim + cfg.d_cond
        dims = [d_in] + [cfg.width] * cfg.hidden_layers + [cfg.d_z]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            std = 1.0 / np.sqrt(a)
            layers.add_linear(self.store, f"{prefix}.fc{i}", a, b, rng, dtype, std=std)
        self.n_layers = len(dims) - 1

    def forward(self, z_t, t_emb, h) -> ad.Tensor:
        """(M,d_z) x (M,time_dim) x (M,d_cond) -> velocity (M,d_z)."""
        x = ad.concat([ad.as_tensor(z_t, dtype=self.dtype),
                       ad.as_tensor(t_emb, dtype=self.dtype),
                       ad.as_tensor(h, dtype=self.dtype)], axis=1)
        for i in range(self.n_layers):
            x = layers.linear(self.store, f"{self.prefix}.fc{i}", x)
            if i < self.n_layers - 1:
                x = ad.silu(x)
        return x

    def velocity(self, z_t: np.ndarray, t: float, h: np.ndarray) -> np.ndarray:
        """Graph-free velocity for sampling."""
        t_emb = layers.time_embedding(np.full(z_t.shape[0], t), self.cfg.time_dim, self.dtype)
        with ad.no_grad():
            return self.forward(z_t, t_emb, h).data


def fm_loss(head: FlowHead, z_target: np.ndarray, h, rng,
            shift_tokens: int = SHIFT_REF, draws=None):
    """Flow-matching regression loss over a batch of latent rows.

    z_target: (M, d_z) clean latents; h: (M, d_cond) conditioning (Tensor to
    train the backbone, array otherwise). Each row draws one shifted time and
    one Gaussian endpoint; the per-row loss is the summed squared channel
    error against the straight-path velocity z_target - eps, and the batch
    loss is the mean over rows. `draws` fixes (t, eps) for gradient checks.
    """
    z_target = np.asarray(z_target)
    M, d_z = z_target.shape
    if draws is None:
        t_base = rng.uniform(size=M)
        eps = rng.standard_normal((M, d_z))
    else:
        t_base, eps = draws
    t = shift_timestep(t_base, shift_tokens)
    t = np.asarray(t, dtype=z_target.dtype).reshape(M, 1)
    eps = eps.astype(z_target.dtype)
    z_t = t * z_target + (1.0 - t) * eps
    target_v = z_target - eps
    t_emb = layers.time_embedding(t[:, 0], head.cfg.time_dim, head.dtype)
    v = head.forward(z_t, t_emb, h)
    err = ad.sub(v, ad.as_tensor(target_v, dtype=head.dtype))
    loss = ad.tmean(ad.tsum(ad.square(err), axis=1))
    return loss, {"fm": loss.item(), "t_mean": float(np.mean(t))}


def sample_grid(steps: int, shift_tokens: int = SHIFT_REF) -> np.ndarray:
    """Shifted integration grid t_k = shift(k/steps), k = 0..steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    base = np.arange(steps + 1, dtype=np.float64) / steps
    return np.asarray(shift_timestep(base, shift_tokens), dtype=np.float64)


def flow_sample(velocity, d_z: int, rng, steps: int = 50,
                shift_tokens: int = SHIFT_REF, n_rows: int = 1,
                eps: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
    """Integrate dz/dt = velocity(z, t) from Gaussian noise at t=0 to t=1.

    velocity: callable (z (n_rows,d_z) array, t float) -> (n_rows,d_z) array.
    Explicit Euler on the shifted grid. eps overrides the initial noise
    (otherwise drawn from rng). Raises on non-finite states.
    """
    grid = sample_grid(steps, shift_tokens)
    if eps is None:
        eps = rng.standard_normal((n_rows, d_z))
    z = np.asarray(eps, dtype=dtype).reshape(n_rows, d_z).copy()
    for k in range(steps):
        v = np.asarray(velocity(z, float(grid[k])), dtype=dtype)
        z += (grid[k + 1] - grid[k]).astype(dtype) * v
        if not np.all(np.isfinite(z)):
            raise ad.NonFiniteError(f"flow sampling diverged at step {k + 1}/{steps}"
                                    f" (t={grid[k + 1]:.4f})")
    return z
