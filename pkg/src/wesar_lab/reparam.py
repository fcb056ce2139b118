"""Weight reparameterizations: WeSaR gates and the three baselines.

Every scheme maps an actual weight ``W`` (what the optimizer updates) to a
virtual weight ``Wbar`` used by the forward pass, and maps ``dL/dWbar`` back to
gradients for ``W`` and for the scheme's scale parameters.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import ConfigError
from .initializers import virtual_std
from .numcore import Rng
from .params import ParamTensor, PowerIterState

ROW_NORM_FLOOR = 1e-12
SPECTRAL_FLOOR = 1e-12


# -- WeSaR -------------------------------------------------------------------


def wesar_gate_init(role: str, d: int, n_layers: int, sigma: float, backbone: str = "He") -> float:
    """Gate value that makes ``alpha * W`` (W drawn with ``sigma``) follow the backbone std."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    return virtual_std(role, d, n_layers, backbone) / sigma


def wesar_apply(w: np.ndarray, alpha) -> np.ndarray:
    return float(alpha) * w


def wesar_backward(dwbar: np.ndarray, w: np.ndarray, alpha) -> tuple[np.ndarray, float]:
    return float(alpha) * dwbar, float(np.sum(dwbar * w))


# -- Weight normalization ----------------------------------------------------


def _row_norms(w: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(w * w, axis=1))
    if np.any(norms < ROW_NORM_FLOOR):
        warnings.warn("weight normalization hit a zero-norm row; flooring at 1e-12", RuntimeWarning, stacklevel=3)
        norms = np.maximum(norms, ROW_NORM_FLOOR)
    return norms


def weightnorm_gate_init(w: np.ndarray, scale: float) -> np.ndarray:
    """Row scales reproducing ``scale * w`` exactly at step 0."""
    return scale * _row_norms(w)


def weightnorm_apply(w: np.ndarray, alpha_rows: np.ndarray) -> np.ndarray:
    return (alpha_rows / _row_norms(w))[:, None] * w


def weightnorm_backward(dwbar: np.ndarray, w: np.ndarray, alpha_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward through ``alpha_i * w_i / ||w_i||`` including the normalization."""
    norms = _row_norms(w)
    what = w / norms[:, None]
    radial = np.sum(dwbar * what, axis=1)
    dw = (alpha_rows / norms)[:, None] * (dwbar - radial[:, None] * what)
    return dw, radial


# -- sigma-reparam -------------------------------------------------------------


def power_iter_init(w: np.ndarray, rng: Rng) -> PowerIterState:
    rows, cols = w.shape
    state = PowerIterState(u=rng.unit_vector(rows), v=rng.unit_vector(cols))
    power_iteration_step(w, state)
    return state


def power_iteration_step(w: np.ndarray, state: PowerIterState) -> float:
    """One power-method update; the estimate is frozen until the next call."""
    v = w.T @ state.u
    v /= np.linalg.norm(v)
    u = w @ v
    u /= np.linalg.norm(u)
    state.u, state.v = u, v
    state.estimate = float(u @ w @ v)
    return state.estimate


def _checked_estimate(state: PowerIterState) -> float:
    if not state.estimate >= SPECTRAL_FLOOR:
        raise ConfigError(f"spectral-norm estimate {state.estimate} is degenerate")
    return state.estimate


def sigma_reparam_apply(w: np.ndarray, alpha, state: PowerIterState) -> np.ndarray:
    return (float(alpha) / _checked_estimate(state)) * w


def sigma_reparam_backward(dwbar: np.ndarray, w: np.ndarray, alpha, state: PowerIterState) -> tuple[np.ndarray, float]:
    # the spectral estimate is treated as a constant
    est = _checked_estimate(state)
    return (float(alpha) / est) * dwbar, float(np.sum(dwbar * w)) / est


# -- Residual scaling ----------------------------------------------------------


def residual_multiplier(n_layers: int) -> float:
    return 1.0 / math.sqrt(2 * n_layers)


def residual_scaling_apply(block_output: np.ndarray, n_layers: int) -> np.ndarray:
    return residual_multiplier(n_layers) * block_output


# -- dispatch over ParamTensor -----------------------------------------------


def virtual_weight(p: ParamTensor, kind: str) -> np.ndarray:
    if p.gate is None:
        return p.weight
    if kind == "wesar":
        return wesar_apply(p.weight, p.gate)
    if kind == "weightnorm":
        return weightnorm_apply(p.weight, p.gate)
    if kind == "sigma_reparam":
        return sigma_reparam_apply(p.weight, p.gate, p.power)
    raise ConfigError(f"tensor {p.name} carries a gate but reparam kind is {kind!r}")


def accumulate_weight_grad(p: ParamTensor, kind: str, dwbar: np.ndarray) -> None:
    """Map dL/dWbar into ``p.grad_weight`` and ``p.grad_gate``."""
    if p.gate is None:
        p.grad_weight += dwbar
        return
    if kind == "wesar":
        dw, dg = wesar_backward(dwbar, p.weight, p.gate)
    elif kind == "weightnorm":
        dw, dg = weightnorm_backward(dwbar, p.weight, p.gate)
    elif kind == "sigma_reparam":
        dw, dg = sigma_reparam_backward(dwbar, p.weight, p.gate, p.power)
    else:
        raise ConfigError(f"tensor {p.name} carries a gate but reparam kind is {kind!r}")
    p.grad_weight += dw
    p.grad_gate += dg


def refresh_spectral_estimates(model) -> None:
    """Advance every sigma-reparam power iteration by one step (once per batch)."""
    if model.reparam.kind != "sigma_reparam":
        return
    for p in model.params.values():
        if p.power is not None:
            power_iteration_step(p.weight, p.power)


def merge_gates(model):
    """Fold WeSaR gates into the weights (``W <- alpha*W``, ``alpha <- 1``); returns the model."""
    if model.reparam.kind != "wesar":
        raise ConfigError(f"gate merging is defined for WeSaR models, not {model.reparam.kind!r}")
    for p in model.params.values():
        if p.gate is None or float(p.gate) == 1.0:
            continue
        p.weight = float(p.gate) * p.weight
        p.gate = np.array(1.0)
    model.zero_grad()
    return model


def extra_param_count(model) -> int:
    return sum(p.n_gate_params for p in model.params.values())
