"""Initialization standard deviations per parameter role, and model initialization.

Two numbers exist for every weight matrix. The *actual* std is what the stored
weight is drawn with; the *virtual* std is the std of the matrix the forward pass
really multiplies by (after a gate or the embedding multiplier). For He and Small
the two only differ on the embedding, where a constant ``1/sigma_e`` multiplier
lifts the embedding output to unit scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numcore import Rng, gaussian_fill
from .params import GAMMA_ROLE, MATRIX_ROLES

SCHEMES = ("He", "Small", "WeSaR")
BACKBONES = ("He", "Small")
EMBED_SCALINGS = ("const_multiplier", "none")


@dataclass
class InitSpec:
    scheme: str = "WeSaR"
    sigma: float | None = math.sqrt(4e-5)
    embed_scaling: str = "const_multiplier"
    backbone: str = "He"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.embed_scaling not in EMBED_SCALINGS:
            raise ConfigError(f"unknown embed_scaling {self.embed_scaling!r}")
        if self.scheme == "WeSaR" and (self.sigma is None or not self.sigma > 0):
            raise ConfigError("WeSaR initialization needs a positive sigma")


def _check(role: str, d: int, n_layers: int) -> None:
    if role not in MATRIX_ROLES:
        raise ConfigError(f"unknown matrix role {role!r}")
    if d < 1 or n_layers < 1:
        raise ConfigError(f"d and n_layers must be >= 1, got d={d}, N={n_layers}")


def he_std(role: str, d: int, n_layers: int, residual_scaled: bool = True) -> float:
    """He std of the stored weight: gain/sqrt(d_in), times 1/sqrt(2N) on W_o and W_d."""
    _check(role, d, n_layers)
    res = 2 * n_layers if residual_scaled else 1
    if role == "W_o":
        return math.sqrt(1.0 / (res * d))
    if role == "W_d":
        # d_in = 4d, ReLU gain sqrt(2)
        return math.sqrt(2.0 / (4 * res * d))
    return math.sqrt(1.0 / d)


def small_std(role: str, d: int, n_layers: int, residual_scaled: bool = True) -> float:
    _check(role, d, n_layers)
    if role in ("W_o", "W_d") and residual_scaled:
        return math.sqrt(2.0 / (10 * n_layers * d))
    return math.sqrt(2.0 / (5 * d))


def virtual_std(role: str, d: int, n_layers: int, backbone: str = "He") -> float:
    """Std of the weight as seen by the forward pass.

    The embedding is always lifted to unit std; everything else follows the
    backbone rule, including the 1/sqrt(2N) residual factor.
    """
    _check(role, d, n_layers)
    if role == "W_e":
        return 1.0
    if backbone == "He":
        return he_std(role, d, n_layers)
    if backbone == "Small":
        return small_std(role, d, n_layers)
    raise ConfigError(f"unknown backbone {backbone!r}")


def actual_std(role: str, spec: InitSpec, d: int, n_layers: int, residual_scaled: bool = True) -> float:
    """Std of the stored weight under ``spec``.

    ``residual_scaled=False`` drops the 1/sqrt(2N) factor on W_o/W_d; the
    residual-scaling reparameterization moves that factor into the forward pass.
    """
    _check(role, d, n_layers)
    if spec.scheme == "WeSaR":
        return float(spec.sigma)
    if spec.scheme == "He":
        return he_std(role, d, n_layers, residual_scaled)
    return small_std(role, d, n_layers, residual_scaled)


def std_table(d: int, n_layers: int, sigma: float, backbone: str = "He") -> list[dict]:
    """Rows of (role, virtual and actual std for each scheme, WeSaR gate)."""
    rows = []
    wesar = InitSpec("WeSaR", sigma=sigma, backbone=backbone)
    for role in MATRIX_ROLES:
        he_a = actual_std(role, InitSpec("He", sigma=None), d, n_layers)
        sm_a = actual_std(role, InitSpec("Small", sigma=None), d, n_layers)
        rows.append(
            {
                "role": role,
                "he_virtual": 1.0 if role == "W_e" else he_a,
                "he_actual": he_a,
                "small_virtual": 1.0 if role == "W_e" else sm_a,
                "small_actual": sm_a,
                "wesar_virtual": virtual_std(role, d, n_layers, backbone),
                "wesar_actual": actual_std(role, wesar, d, n_layers),
                "wesar_gate": virtual_std(role, d, n_layers, backbone) / sigma,
            }
        )
    return rows


def initialize_model(model, spec: InitSpec, rng: Rng) -> None:
    """Draw every weight, set gamma to ones and set gates for the model's reparam mode."""
    from . import reparam

    cfg = model.config
    mode = model.reparam
    d, n = cfg.d, cfg.n_layers
    if mode.gated and spec.scheme != "WeSaR":
        raise ConfigError(f"reparam kind {mode.kind!r} draws actual weights with a common sigma; set init.scheme = WeSaR")
    if not mode.gated and spec.scheme == "WeSaR":
        raise ConfigError(f"init.scheme = WeSaR needs a gated reparam kind, got {mode.kind!r}")
    residual_scaled = mode.kind != "residual_scaling"

    for p in model.params.values():
        if p.role == GAMMA_ROLE:
            p.weight = np.ones_like(p.weight)
            p.gate = None
            continue
        rows, cols = p.weight.shape
        std = actual_std(p.role, spec, d, n, residual_scaled)
        p.weight = gaussian_fill(rng.child(p.name), rows, cols, std)
        p.gate = None
        p.power = None
        p.gate_trainable = not mode.fixed_gate
        if mode.kind == "wesar":
            p.gate = np.array(reparam.wesar_gate_init(p.role, d, n, spec.sigma, spec.backbone))
        elif mode.kind == "weightnorm":
            target = virtual_std(p.role, d, n, spec.backbone) / spec.sigma
            p.gate = reparam.weightnorm_gate_init(p.weight, target)
        elif mode.kind == "sigma_reparam":
            p.gate = np.array(1.0)
            p.power = reparam.power_iter_init(p.weight, rng.child(p.name + ".power"))

    model.embed_scale = 1.0
    if mode.kind == "sigma_reparam":
        # constant multiplier restoring unit std on the normalized embedding
        w_e = model.params["W_e"]
        model.embed_scale = float(w_e.power.estimate / spec.sigma)
    elif spec.scheme != "WeSaR" and spec.embed_scaling == "const_multiplier":
        model.embed_scale = 1.0 / actual_std("W_e", spec, d, n)
    model.zero_grad()
