import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wesar_lab.errors import ConfigError, DivergedError
from wesar_lab.numcore import Rng
from wesar_lab.optim import Adam, AdamState, TrainConfig, adam_step, clip_global, global_norm, lr_at
from wesar_lab.verify import adam_invariance_probe, tiny_model


def scalar_adam(ws, gs, lr, b1, b2, eps, wd):
    """Plain-float Adam over a list of scalars, one list of gradients per step."""
    m = [0.0] * len(ws)
    v = [0.0] * len(ws)
    ws = list(ws)
    history = []
    for t, g in enumerate(gs, 1):
        deltas = []
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            step = 0.0 if eps == 0 and vh == 0 else mh / (math.sqrt(vh) + eps)
            delta = -lr * step - lr * wd * ws[i]
            ws[i] += delta
            deltas.append(delta)
        history.append(deltas)
    return ws, history


@pytest.mark.parametrize("eps,wd", [(1e-8, 0.0), (1e-8, 0.1), (0.0, 0.0)])
def test_adam_matches_scalar_oracle(eps, wd):
    rng = Rng(0)
    w0 = rng.standard_normal(6)
    gs = [rng.child(str(t)).standard_normal(6) for t in range(30)]
    w = w0.copy()
    state = AdamState.like(w)
    got = [adam_step(w, g, state, 3e-3, 0.9, 0.95, eps, wd) for g in gs]
    ref_w, ref_hist = scalar_adam(w0.tolist(), [g.tolist() for g in gs], 3e-3, 0.9, 0.95, eps, wd)
    assert np.allclose(w, ref_w, rtol=0, atol=1e-15)
    assert np.allclose(np.array(got), np.array(ref_hist), rtol=0, atol=1e-15)


def test_first_step_is_signed_lr():
    w = np.array([1.0, -2.0, 3.0])
    delta = adam_step(w, np.array([0.5, -4.0, 0.0]), AdamState.like(w), 1e-3, eps=0.0)
    assert np.allclose(delta, [-1e-3, 1e-3, 0.0], atol=1e-18)


def test_zero_gradient_with_zero_eps_gives_zero_update():
    w = np.ones(3)
    delta = adam_step(w, np.zeros(3), AdamState.like(w), 1e-3, eps=0.0)
    assert np.array_equal(delta, np.zeros(3))


def test_nan_gradient_raises():
    w = np.ones(2)
    with pytest.raises(DivergedError):
        adam_step(w, np.array([np.nan, 1.0]), AdamState.like(w), 1e-3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
def test_adam_update_is_gradient_scale_invariant(seed, c):
    rng = Rng(seed)
    w0 = rng.standard_normal(5)
    wa, wb = w0.copy(), w0.copy()
    sa, sb = AdamState.like(w0), AdamState.like(w0)
    for t in range(10):
        g = rng.child(str(t)).standard_normal(5)
        da = adam_step(wa, g, sa, 1e-3, eps=0.0)
        db = adam_step(wb, c * g, sb, 1e-3, eps=0.0)
        assert np.allclose(da, db, rtol=1e-9, atol=1e-15)


def test_invariance_probe_passes():
    r = adam_invariance_probe()
    assert r.passed and r.measured < 1e-12


def test_schedule_values():
    cfg = TrainConfig(lr=1e-3, warmup_steps=100, total_steps=2000)
    assert lr_at(1, cfg) == pytest.approx(1e-5)
    assert lr_at(100, cfg) == pytest.approx(1e-3)
    assert lr_at(1050, cfg) == pytest.approx(1e-4 + 0.9e-3 * 0.5, rel=1e-12)
    assert lr_at(2000, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(5000, cfg) == pytest.approx(1e-4, rel=1e-12)
    with pytest.raises(ConfigError):
        lr_at(0, cfg)


def test_schedule_without_warmup():
    cfg = TrainConfig(lr=2e-3, warmup_steps=0, total_steps=10)
    assert lr_at(1, cfg) < 2e-3
    assert lr_at(10, cfg) == pytest.approx(2e-4)


def test_clip_preserves_direction_and_bounds_norm():
    rng = Rng(1)
    grads = [rng.child("a").standard_normal((3, 3)), rng.child("b").standard_normal(4)]
    before = np.concatenate([g.ravel() for g in grads])
    norm = clip_global(grads, 0.5)
    after = np.concatenate([g.ravel() for g in grads])
    assert norm == pytest.approx(np.linalg.norm(before))
    assert global_norm(grads) == pytest.approx(0.5, rel=1e-14)
    cos = before @ after / (np.linalg.norm(before) * np.linalg.norm(after))
    assert abs(cos - 1.0) < 1e-12


def test_clip_below_threshold_is_untouched():
    g = [np.array([0.3, 0.4])]
    assert clip_global(g, 1.0) == pytest.approx(0.5)
    assert np.array_equal(g[0], [0.3, 0.4])


def test_clip_non_finite_raises():
    with pytest.raises(DivergedError):
        clip_global([np.array([np.inf])], 1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(beta2=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_threshold=0.0)


def test_model_adam_skips_decay_on_gates_and_gamma():
    m = tiny_model("wesar")
    for p in m.params.values():
        p.zero_grad()
    opt = Adam(TrainConfig(weight_decay=0.5))
    deltas = opt.step(m, 1e-2)
    assert not np.any(deltas["layer0.gamma_LN_attn"])
    assert not np.any(deltas["W_e.gate"])
    assert np.any(deltas["W_e"])


def test_fixed_gates_are_not_trained():
    m = tiny_model("wesar", fixed_gate=True)
    keys = [k for k, *_ in Adam(TrainConfig()).trainable(m)]
    assert not any(k.endswith(".gate") for k in keys)
