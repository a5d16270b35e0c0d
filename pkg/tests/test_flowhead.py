"""Flow head: timestep shift algebra, loss statistics, Euler sampler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphgen import autodiff as ad
from glyphgen import flowhead as fh
from glyphgen.layers import time_embedding

NANO = fh.FlowConfig(d_z=4, d_cond=8, width=16, hidden_layers=2, time_dim=8)


def nano_head(seed=0, dtype=np.float32):
    return fh.FlowHead(NANO, np.random.default_rng(seed), dtype=dtype)


# ------------------------------------------------------------------ shift


def test_shift_known_value():
    # alpha = sqrt(1024/4096) = 0.5; 0.5*0.5 / (1 - 0.5*0.5) = 1/3.
    assert abs(fh.shift_timestep(0.5, m=1024, n=4096) - 1.0 / 3.0) < 1e-12


def test_shift_identity_and_endpoints():
    ts = np.linspace(0, 1, 11)
    assert np.allclose(fh.shift_timestep(ts, m=4096, n=4096), ts, atol=1e-12)
    for m in (1, 64, 512, 4096, 100000):
        assert fh.shift_timestep(0.0, m=m) == 0.0
        assert fh.shift_timestep(1.0, m=m) == 1.0


def test_shift_small_m_pushes_toward_zero():
    ts = np.linspace(0.05, 0.95, 10)
    shifted = fh.shift_timestep(ts, m=512, n=4096)
    assert np.all(shifted < ts)
    bigger = fh.shift_timestep(ts, m=4096 * 4, n=4096)
    assert np.all(bigger > ts)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 10_000), t1=st.floats(0, 1), t2=st.floats(0, 1))
def test_shift_monotone_and_bounded(m, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = fh.shift_timestep(lo, m=m), fh.shift_timestep(hi, m=m)
    assert 0.0 <= a <= b <= 1.0


def test_shift_argument_validation():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        fh.shift_timestep(1.5, m=64)
    with pytest.raises(ValueError, match=">= 1"):
        fh.shift_timestep(0.5, m=0)


# ------------------------------------------------------------------- grid


def test_sample_grid_endpoints_and_single_step():
    g = fh.sample_grid(1, shift_tokens=fh.SHIFT_REF)
    assert np.allclose(g, [0.0, 1.0], atol=1e-12)
    g50 = fh.sample_grid(50, shift_tokens=512)
    assert g50[0] == 0.0 and abs(g50[-1] - 1.0) < 1e-12
    assert np.all(np.diff(g50) > 0)
    with pytest.raises(ValueError, match="steps"):
        fh.sample_grid(0)


# ------------------------------------------------------------------- loss


def test_fm_loss_expectation_equals_channel_count():
    # Zero the network output; with zero targets the per-row loss is |eps|^2,
    # whose expectation over many rows is d_z.
    head = nano_head()
    for i in range(head.n_layers):
        head.store[f"flow.fc{i}.w"].data[:] = 0
        head.store[f"flow.fc{i}.b"].data[:] = 0
    M = 100_000
    z = np.zeros((M, NANO.d_z), dtype=np.float32)
    h = np.zeros((M, NANO.d_cond), dtype=np.float32)
    loss, parts = fm_loss_silent(head, z, h, np.random.default_rng(0))
    assert abs(loss.item() - NANO.d_z) < 0.02 * NANO.d_z
    assert parts["fm"] == loss.item()


def fm_loss_silent(head, z, h, rng):
    with ad.no_grad():
        return fh.fm_loss(head, z, h, rng)


def test_fm_loss_is_deterministic_given_seed():
    head = nano_head()
    z = np.random.default_rng(1).standard_normal((8, NANO.d_z)).astype(np.float32)
    h = np.random.default_rng(2).standard_normal((8, NANO.d_cond)).astype(np.float32)
    with ad.no_grad():
        a, _ = fh.fm_loss(head, z, h, np.random.default_rng(7))
        b, _ = fh.fm_loss(head, z, h, np.random.default_rng(7))
    assert a.item() == b.item()


def test_fm_loss_shift_changes_time_distribution():
    head = nano_head()
    z = np.zeros((4096, NANO.d_z), dtype=np.float32)
    h = np.zeros((4096, NANO.d_cond), dtype=np.float32)
    with ad.no_grad():
        _, p_id = fh.fm_loss(head, z, h, np.random.default_rng(0), shift_tokens=fh.SHIFT_REF)
        _, p_sm = fh.fm_loss(head, z, h, np.random.default_rng(0), shift_tokens=64)
    assert p_sm["t_mean"] < p_id["t_mean"] - 0.1


def test_fm_loss_gradient_check():
    head = nano_head(seed=3, dtype=np.float64)
    rng = np.random.default_rng(4)
    M = 3
    z = rng.standard_normal((M, NANO.d_z))
    h_leaf = ad.param(rng.standard_normal((M, NANO.d_cond)), "h")
    draws = (rng.uniform(size=M), rng.standard_normal((M, NANO.d_z)))

    def f():
        return fh.fm_loss(head, z, h_leaf, None, shift_tokens=256, draws=draws)[0]

    params = [h_leaf] + [head.store[f"flow.fc{i}.w"] for i in range(head.n_layers)]
    worst, _ = ad.grad_check(f, params, max_coords=20, rng=np.random.default_rng(5))
    assert worst < 1e-6


# ---------------------------------------------------------------- sampler


def test_single_step_euler_is_one_velocity_jump():
    d_z = 4
    eps = np.random.default_rng(0).standard_normal((1, d_z))
    v = np.random.default_rng(1).standard_normal((1, d_z))
    out = fh.flow_sample(lambda z, t: v, d_z, rng=None, steps=1, eps=eps,
                         dtype=np.float64)
    assert np.allclose(out, eps + v, atol=1e-12)


@pytest.mark.parametrize("steps", [1, 7, 50])
@pytest.mark.parametrize("shift_tokens", [fh.SHIFT_REF, 512])
def test_linear_path_oracle_is_exact_for_any_step_count(steps, shift_tokens):
    # For the field v(z,t) = (c - z)/(1 - t), explicit Euler lands exactly on
    # c from any start and under any grid, so step count must not matter.
    rng = np.random.default_rng(2)
    c = rng.standard_normal((3, 5))

    def velocity(z, t):
        return (c - z) / (1.0 - t)

    out = fh.flow_sample(velocity, 5, rng=np.random.default_rng(3), steps=steps,
                         shift_tokens=shift_tokens, n_rows=3, dtype=np.float64)
    assert np.allclose(out, c, atol=1e-9)


def test_flow_sample_draws_noise_from_rng_deterministically():
    out1 = fh.flow_sample(lambda z, t: np.zeros_like(z), 4,
                          rng=np.random.default_rng(9), steps=3, n_rows=2)
    out2 = fh.flow_sample(lambda z, t: np.zeros_like(z), 4,
                          rng=np.random.default_rng(9), steps=3, n_rows=2)
    assert np.array_equal(out1, out2)
    assert out1.shape == (2, 4)


def test_flow_sample_divergence_raises_with_step_report():
    def blowup(z, t):
        return z * 1e25 + 1e25

    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError, match="diverged at step"):
        fh.flow_sample(blowup, 4, rng=np.random.default_rng(0), steps=8)


def test_head_velocity_matches_forward():
    head = nano_head(seed=5)
    rng = np.random.default_rng(6)
    z = rng.standard_normal((3, NANO.d_z)).astype(np.float32)
    h = rng.standard_normal((3, NANO.d_cond)).astype(np.float32)
    t = 0.37
    v = head.velocity(z, t, h)
    emb = time_embedding(np.full(3, t), NANO.time_dim)
    with ad.no_grad():
        ref = head.forward(z, emb, h).data
    assert np.array_equal(v, ref)


def test_time_embedding_properties():
    emb = time_embedding(np.array([0.0, 0.25, 1.0]), 8)
    assert emb.shape == (3, 8)
    assert np.abs(emb).max() <= 1.0
    assert not np.allclose(emb[0], emb[1])
    # t=0: sines vanish, cosines are one.
    assert np.allclose(emb[0, :4], 0.0) and np.allclose(emb[0, 4:], 1.0)
