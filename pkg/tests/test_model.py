import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from wesar_lab import model as M
from wesar_lab.errors import ConfigError, InputError, StaleCacheError
from wesar_lab.initializers import InitSpec, initialize_model
from wesar_lab.numcore import Rng
from wesar_lab.params import ReparamMode


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def small_model(kind="none", scheme="Small", **kw):
    cfg = M.ModelConfig(**{**dict(d=8, n_layers=2, n_heads=2, vocab=16, ctx=6), **kw})
    m = M.TransformerLM(cfg, ReparamMode(kind=kind))
    initialize_model(m, InitSpec(scheme=scheme, sigma=0.0063 if scheme == "WeSaR" else None), Rng(0))
    return m


# -- RMSNorm -------------------------------------------------------------------


def test_rmsnorm_frozen_values():
    y = M.rmsnorm_forward(np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4), eps=0.0)
    # mean of squares is 7.5
    assert np.allclose(y, np.array([1.0, 2.0, 3.0, 4.0]) * 0.3651483716701107, atol=1e-15)
    y = M.rmsnorm_forward(np.array([3.0, -4.0]), np.array([2.0, 0.5]), eps=1e-5)
    s = 1.0 / math.sqrt(12.5 + 1e-5)
    assert np.allclose(y, [6.0 * s, -2.0 * s], rtol=1e-15)


def test_rmsnorm_backward_matches_finite_differences():
    rng = Rng(1)
    x = rng.standard_normal((3, 5))
    gamma = 1.0 + 0.1 * rng.standard_normal(5)
    dy = rng.standard_normal((3, 5))
    dx, dgamma = M.rmsnorm_backward(x, gamma, dy, eps=1e-2)

    def f():
        return float(np.sum(dy * M.rmsnorm_forward(x, gamma, eps=1e-2)))

    assert rel(dx, numeric_grad(f, x)) < 1e-8
    assert rel(dgamma, numeric_grad(f, gamma)) < 1e-8


def test_rmsnorm_zero_length_rejected():
    with pytest.raises(ConfigError):
        M.rmsnorm_forward(np.zeros((2, 0)), np.ones(0))


# -- GELU ----------------------------------------------------------------------------


@pytest.mark.parametrize("u", [-3.0, -1.0, 0.0, 0.5, 1.0, 2.5])
def test_gelu_matches_erf_form(u):
    expected = 0.5 * u * (1.0 + math.erf(u / math.sqrt(2.0)))
    assert M.gelu(np.array(u)) == pytest.approx(expected, abs=1e-15)


def test_gelu_frozen_and_grad():
    assert M.gelu(np.array(1.0)) == pytest.approx(0.8413447460685429, abs=1e-15)
    u = np.linspace(-4, 4, 17)
    h = 1e-6
    assert np.allclose(M.gelu_grad(u), (M.gelu(u + h) - M.gelu(u - h)) / (2 * h), atol=1e-9)


# -- RoPE ------------------------------------------------------------------------


def test_rope_preserves_norm_and_is_identity_at_zero():
    cos, sin = M.rope_tables(5, 8)
    x = Rng(2).standard_normal((5, 8))
    y = M.rope_apply(x, cos, sin)
    assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-14)
    assert np.array_equal(y[0], x[0])


def test_rope_frequency_table():
    cos, sin = M.rope_tables(3, 4, base=10000.0)
    # pair frequencies are 1 and 1/100 for head_dim 4
    assert sin[2, 0] == pytest.approx(math.sin(2.0), abs=1e-15)
    assert sin[2, 1] == pytest.approx(math.sin(0.02), abs=1e-15)
    assert cos[1, 3] == pytest.approx(math.cos(0.01), abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 20), st.integers(0, 20), st.integers(1, 10))
def test_rope_scores_depend_on_offset_only(seed, m, n, shift):
    cos, sin = M.rope_tables(32, 8)
    q, k = Rng(seed).standard_normal((2, 8))

    def score(i, j):
        return M.rope_apply(q, cos[i], sin[i]) @ M.rope_apply(k, cos[j], sin[j])

    assert score(m, n) == pytest.approx(score(m + shift, n + shift), rel=1e-9, abs=1e-12)


def test_rope_backward_is_adjoint():
    cos, sin = M.rope_tables(4, 6)
    x, y = Rng(3).standard_normal((2, 4, 6))
    lhs = np.sum(M.rope_apply(x, cos, sin) * y)
    rhs = np.sum(x * M.rope_backward(y, cos, sin))
    assert lhs == pytest.approx(rhs, rel=1e-13)


# -- attention and FFN ------------------------------------------------------------------


def _attn_inputs(t=7, d=8, b=2):
    rng = Rng(4)
    h = rng.standard_normal((b, t, d))
    ws = [0.4 * rng.child(n).standard_normal((d, d)) for n in "qkvo"]
    return h, ws


def test_attention_blocking_does_not_change_output():
    h, ws = _attn_inputs(t=11)
    cos, sin = M.rope_tables(11, 4)
    full, c1 = M.attention_forward(h, *ws, 2, cos, sin, block=64)
    tiled, c2 = M.attention_forward(h, *ws, 2, cos, sin, block=3)
    assert np.allclose(full, tiled, atol=1e-14)
    p = M.attention_probs(c2)
    assert np.allclose(p.sum(-1), 1.0)
    assert np.all(p[..., np.triu_indices(11, 1)[0], np.triu_indices(11, 1)[1]] == 0.0)


def test_attention_backward_matches_finite_differences():
    h, ws = _attn_inputs()
    cos, sin = M.rope_tables(7, 4)
    dout = Rng(5).standard_normal(h.shape)

    def f():
        return float(np.sum(dout * M.attention_forward(h, *ws, 2, cos, sin, block=3)[0]))

    _, cache = M.attention_forward(h, *ws, 2, cos, sin, block=3)
    grads = M.attention_backward(dout, cache, *ws, cos, sin)
    for analytic, arr in zip(grads, [h] + ws):
        assert rel(analytic, numeric_grad(f, arr)) < 1e-7


def test_ffn_backward_matches_finite_differences():
    rng = Rng(6)
    h = rng.standard_normal((2, 3, 4))
    wu, wd = 0.5 * rng.child("u").standard_normal((16, 4)), 0.5 * rng.child("d").standard_normal((4, 16))
    dout = rng.child("g").standard_normal((2, 3, 4))

    def f():
        return float(np.sum(dout * M.ffn_forward(h, wu, wd)[0]))

    _, cache = M.ffn_forward(h, wu, wd)
    for analytic, arr in zip(M.ffn_backward(dout, cache, wu, wd), (h, wu, wd)):
        assert rel(analytic, numeric_grad(f, arr)) < 1e-8


# -- loss ---------------------------------------------------------------------------


def test_softmax_xent_against_logsumexp_oracle():
    rng = Rng(7)
    logits = 3.0 * rng.standard_normal((5, 6))
    targets = np.array([0, 5, 2, -1, 3])
    loss, ce, d = M.softmax_xent(logits, targets, z_coeff=1e-2)
    lse = logsumexp(logits, axis=1)
    keep = targets >= 0
    ce_ref = np.mean(lse[keep] - logits[keep, targets[keep]])
    assert ce == pytest.approx(ce_ref, rel=1e-13)
    assert loss == pytest.approx(ce_ref + 1e-2 * np.mean(lse[keep] ** 2), rel=1e-13)
    assert not np.any(d[3])

    def f():
        return M.softmax_xent(logits, targets, 1e-2)[0]

    assert rel(d, numeric_grad(f, logits)) < 1e-8


def test_softmax_xent_uniform_and_empty():
    loss, ce, _ = M.softmax_xent(np.zeros((4, 256)), np.array([1, 2, 3, 4]), 0.0)
    assert ce == pytest.approx(math.log(256), abs=1e-14)
    loss, ce, d = M.softmax_xent(np.zeros((2, 3)), np.array([-1, -1]), 1e-4)
    assert loss == 0.0 and ce == 0.0 and not np.any(d)


# -- whole model ------------------------------------------------------------------------


def test_model_is_causal():
    m = small_model()
    tokens = Rng(8).integers(0, 16, size=(1, 6))
    changed = tokens.copy()
    changed[0, 4:] = (changed[0, 4:] + 1) % 16
    a, b = m.logits(tokens), m.logits(changed)
    assert np.array_equal(a[:, :4], b[:, :4])
    assert not np.allclose(a[:, 4:], b[:, 4:])


def test_model_gradients_match_finite_differences():
    from wesar_lab.verify import fd_gradients, rel_error

    m = small_model(kind="wesar", scheme="WeSaR", n_layers=1)
    tokens = Rng(9).integers(0, 16, size=(2, 6))
    targets = Rng(10).integers(0, 16, size=(2, 6))
    for key, (analytic, numeric) in fd_gradients(m, tokens, targets).items():
        assert rel_error(analytic, numeric) < 1e-5, key


def test_stale_cache_rejected():
    m = small_model()
    tokens = np.zeros((1, 6), dtype=np.int64)
    _, old = m.forward_loss(tokens, tokens)
    _, new = m.forward_loss(tokens, tokens)
    with pytest.raises(StaleCacheError):
        m.backward(old)
    m.backward(new)
    with pytest.raises(StaleCacheError):
        m.backward(new)


def test_token_validation():
    m = small_model()
    with pytest.raises(InputError):
        m.logits(np.array([[0, 16]]))
    with pytest.raises(InputError):
        m.logits(np.array([[0.5, 1.0]]))
    with pytest.raises(InputError):
        m.forward_loss(np.zeros((1, 3), dtype=int), np.zeros((1, 4), dtype=int))


def test_config_validation():
    with pytest.raises(ConfigError):
        M.ModelConfig(d=10, n_heads=4)
    with pytest.raises(ConfigError):
        M.ModelConfig(d=6, n_heads=2)
    with pytest.raises(ConfigError):
        M.ModelConfig(n_layers=0)


def test_parameter_layout():
    shapes = M.ModelConfig(d=8, n_layers=2, n_heads=2, vocab=16).shapes()
    assert shapes["W_e"] == ("W_e", None, (16, 8))
    assert shapes["layer1.W_u"] == ("W_u", 1, (32, 8))
    assert shapes["layer1.W_d"] == ("W_d", 1, (8, 32))
    assert len(shapes) == 1 + 2 * 8 + 2
