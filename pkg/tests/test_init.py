import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wesar_lab.errors import ConfigError
from wesar_lab.initializers import InitSpec, actual_std, initialize_model, std_table, virtual_std
from wesar_lab.model import ModelConfig, TransformerLM
from wesar_lab.numcore import Rng
from wesar_lab.params import MATRIX_ROLES, ReparamMode

SIGMA = math.sqrt(4e-5)


def he_reference(role, d, n):
    # stored-weight He stds written out independently
    table = {
        "W_e": (1 / d) ** 0.5,
        "W_q": (1 / d) ** 0.5,
        "W_k": (1 / d) ** 0.5,
        "W_v": (1 / d) ** 0.5,
        "W_o": (1 / (2 * n * d)) ** 0.5,
        "W_u": (1 / d) ** 0.5,
        "W_d": (2 / (4 * d * 2 * n)) ** 0.5,
        "W_p": (1 / d) ** 0.5,
    }
    return table[role]


def small_reference(role, d, n):
    return (2 / (10 * n * d)) ** 0.5 if role in ("W_o", "W_d") else (2 / (5 * d)) ** 0.5


def test_frozen_he_and_wesar_values():
    rows = {r["role"]: r for r in std_table(768, 12, SIGMA)}
    assert rows["W_d"]["he_actual"] == pytest.approx(5.2083e-3, abs=5e-8)
    assert rows["W_d"]["he_actual"] == pytest.approx(1 / 192, abs=1e-15)
    assert rows["W_q"]["wesar_actual"] == pytest.approx(6.3246e-3, abs=5e-8)
    assert rows["W_e"]["wesar_gate"] == pytest.approx(158.11388300841898, rel=1e-14)


@pytest.mark.parametrize("d,n", [(64, 4), (768, 12), (2048, 24)])
def test_table_matches_closed_form(d, n):
    for r in std_table(d, n, SIGMA):
        role = r["role"]
        assert abs(r["he_actual"] - he_reference(role, d, n)) <= 1e-12
        assert abs(r["small_actual"] - small_reference(role, d, n)) <= 1e-12
        assert abs(r["wesar_actual"] - SIGMA) <= 1e-12
        expected_virtual = 1.0 if role == "W_e" else he_reference(role, d, n)
        assert abs(r["he_virtual"] - expected_virtual) <= 1e-12
        assert abs(r["wesar_virtual"] - expected_virtual) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 64), st.sampled_from(MATRIX_ROLES))
def test_gate_times_sigma_recovers_virtual_std(d, n, role):
    gate = std_table(d, n, SIGMA)[MATRIX_ROLES.index(role)]["wesar_gate"]
    v = virtual_std(role, d, n)
    assert abs(gate * SIGMA - v) <= 2 * np.spacing(v)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2048), st.integers(1, 48), st.sampled_from(MATRIX_ROLES), st.sampled_from(["He", "Small"]))
def test_stds_decrease_in_d_and_residual_stds_in_n(d, n, role, scheme):
    spec = InitSpec(scheme=scheme, sigma=None)
    assert actual_std(role, spec, d + 1, n) < actual_std(role, spec, d, n)
    if role in ("W_o", "W_d"):
        assert actual_std(role, spec, d, n + 1) < actual_std(role, spec, d, n)


def test_small_skew_between_w_d_and_w_u():
    d, n = 64, 12
    spec = InitSpec(scheme="Small", sigma=None)
    ratio = actual_std("W_d", spec, d, n) / actual_std("W_u", spec, d, n)
    assert ratio == pytest.approx(1 / math.sqrt(2 * n), rel=1e-14)


def test_bad_inputs_rejected():
    with pytest.raises(ConfigError):
        virtual_std("W_x", 8, 1)
    with pytest.raises(ConfigError):
        InitSpec(scheme="Xavier")
    with pytest.raises(ConfigError):
        InitSpec(scheme="WeSaR", sigma=0.0)


def build(kind, scheme, d=32, n=2):
    m = TransformerLM(ModelConfig(d=d, n_layers=n, n_heads=2, vocab=256, ctx=8), ReparamMode(kind=kind))
    initialize_model(m, InitSpec(scheme=scheme, sigma=SIGMA if scheme == "WeSaR" else None), Rng(0))
    return m


def test_wesar_model_initialization():
    m = build("wesar", "WeSaR")
    for name, p in m.params.items():
        if p.role == "gamma_LN":
            assert np.array_equal(p.weight, np.ones_like(p.weight))
            continue
        tol = 0.03 if p.weight.size >= 10_000 else 0.1
        assert np.std(p.weight) == pytest.approx(SIGMA, rel=tol), name
        assert float(p.gate) * SIGMA == pytest.approx(virtual_std(p.role, 32, 2), rel=1e-14)
    assert m.embed_scale == 1.0


def test_baseline_embedding_scaling():
    m = build("none", "Small")
    assert m.embed_scale == pytest.approx(1 / math.sqrt(2 / (5 * 32)), rel=1e-14)
    assert all(p.gate is None for p in m.params.values())


def test_weightnorm_starts_at_wesar_virtual_weights():
    wn, ws = build("weightnorm", "WeSaR"), build("wesar", "WeSaR")
    a, b = wn.virtual_weights(), ws.virtual_weights()
    for name in a:
        assert np.allclose(a[name], b[name], rtol=1e-12, atol=0), name


def test_sigma_reparam_normalizes_by_spectral_estimate():
    m = build("sigma_reparam", "WeSaR")
    p = m.params["layer0.W_q"]
    assert float(p.gate) == 1.0
    assert np.allclose(m.virtual_weights()["layer0.W_q"], p.weight / p.power.estimate)
    assert m.embed_scale == pytest.approx(m.params["W_e"].power.estimate / SIGMA)


def test_residual_scaling_keeps_w_o_unshrunk():
    m = build("residual_scaling", "Small")
    assert np.std(m.params["layer0.W_o"].weight) == pytest.approx(math.sqrt(2 / (5 * 32)), rel=0.05)
    assert m.residual_scale == pytest.approx(0.5)


def test_scheme_kind_mismatch_rejected():
    with pytest.raises(ConfigError):
        build("wesar", "He")
    with pytest.raises(ConfigError):
        build("none", "WeSaR")


def test_initialization_is_deterministic():
    a, b = build("wesar", "WeSaR"), build("wesar", "WeSaR")
    assert all(np.array_equal(a.params[k].weight, b.params[k].weight) for k in a.params)
