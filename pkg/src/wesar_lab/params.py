"""Parameter containers shared by the model, reparameterizations and optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MATRIX_ROLES = ("W_e", "W_q", "W_k", "W_v", "W_o", "W_u", "W_d", "W_p")
GAMMA_ROLE = "gamma_LN"
ROLES = MATRIX_ROLES + (GAMMA_ROLE,)

REPARAM_KINDS = ("none", "wesar", "weightnorm", "sigma_reparam", "residual_scaling")
# kinds that attach a trainable scale to every weight matrix
GATED_KINDS = ("wesar", "weightnorm", "sigma_reparam")


@dataclass
class ReparamMode:
    kind: str = "wesar"
    sigma_sq: float = 4e-5
    fixed_gate: bool = False

    def __post_init__(self):
        if self.kind not in REPARAM_KINDS:
            raise ConfigError(f"unknown reparam kind {self.kind!r}; expected one of {REPARAM_KINDS}")
        if not self.sigma_sq > 0:
            raise ConfigError(f"reparam.sigma_sq must be positive, got {self.sigma_sq}")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma_sq))

    @property
    def gated(self) -> bool:
        return self.kind in GATED_KINDS


@dataclass
class PowerIterState:
    u: np.ndarray
    v: np.ndarray
    estimate: float = 0.0


@dataclass
class ParamTensor:
    """One trainable tensor: an actual weight plus its optional scale gate.

    ``gate`` is a 0-d array for matrix-wise gates (WeSaR, sigma-reparam) and a
    vector with one entry per row for weight normalization.
    """

    name: str
    role: str
    layer: int | None
    weight: np.ndarray
    gate: np.ndarray | None = None
    gate_trainable: bool = True
    power: PowerIterState | None = None
    grad_weight: np.ndarray | None = field(default=None, repr=False)
    grad_gate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown parameter role {self.role!r}")

    @property
    def is_matrix(self) -> bool:
        return self.role in MATRIX_ROLES

    @property
    def n_gate_params(self) -> int:
        return 0 if self.gate is None else int(self.gate.size)

    def zero_grad(self) -> None:
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_gate = None if self.gate is None else np.zeros_like(self.gate)
