"""Closed-form continuous-time (CfC) cell and a reference LTC ODE stepper.

The CfC cell shares one Tanh backbone between three single-layer heads.  Head
``f`` is the liquid time-constant logit; heads ``g`` and ``h`` are the two
Tanh-bounded targets mixed by the time-continuous gate
``sigmoid(-f * tbar)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .tensor.init import xavier_uniform, zeros
from .tensor.ops import _sigmoid


class DomainError(ValueError):
    pass


def check_tbar(tbar) -> np.ndarray:
    t = np.asarray(tbar, dtype=np.float64)
    if t.size == 0 or np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise DomainError(f"normalized instant must lie in [0, 1], got {tbar!r}")
    return t


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str) -> "Dense":
        return cls(T.parameter(xavier_uniform((n_out, n_in), rng), f"{name}.weight"),
                   T.parameter(zeros(n_out), f"{name}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.W, self.b)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.W, f"{prefix}.bias": self.b}


@dataclass
class CfcCellParams:
    backbone: Dense
    head_f: Dense
    head_g: Dense
    head_h: Dense

    @classmethod
    def init(cls, feature_dim: int = 256, hidden_dim: int = 64, backbone_dim: int = 128,
             rng: np.random.Generator | None = None) -> "CfcCellParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            Dense.init(feature_dim + hidden_dim, backbone_dim, rng, "lnn.backbone"),
            Dense.init(backbone_dim, hidden_dim, rng, "lnn.head_f"),
            Dense.init(backbone_dim, hidden_dim, rng, "lnn.head_g"),
            Dense.init(backbone_dim, hidden_dim, rng, "lnn.head_h"),
        )

    @property
    def hidden_dim(self) -> int:
        return self.head_g.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.backbone.W.shape[1]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name in ("backbone", "head_f", "head_g", "head_h"):
            out.update(getattr(self, name).named_parameters(f"lnn.{name}"))
        return out


def cfc_gate(f: Tensor, tbar) -> Tensor:
    """``sigmoid(-f * tbar)``; ``tbar`` is a scalar or one value per row."""
    t = check_tbar(tbar)
    if t.ndim == 1:
        t = t[:, None]
    return T.sigmoid(T.mul(f, -t))


def cfc_forward(feat: Tensor, h_prev: Tensor, tbar, params: CfcCellParams,
                return_parts: bool = False):
    """One CfC update evaluated at normalized instant ``tbar``.

    Heads are evaluated on ``(feat, h_prev)``, so the recurrence is explicit.
    """
    z = T.tanh(params.backbone(T.concat([feat, h_prev], axis=1)))
    f = params.head_f(z)
    g = T.tanh(params.head_g(z))
    h = T.tanh(params.head_h(z))
    gate = cfc_gate(f, tbar)
    out = gate * g + T.rsub(gate, 1.0) * h
    if return_parts:
        return out, {"gate": gate, "f": f, "g": g, "h": h}
    return out


@dataclass
class LtcReferenceParams:
    omega_tau: np.ndarray
    a: np.ndarray
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, hidden_dim: int = 64, input_dim: int = 8,
             rng: np.random.Generator | None = None) -> "LtcReferenceParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        omega = rng.uniform(0.5, 2.0, size=hidden_dim)
        a = rng.uniform(-1.0, 1.0, size=hidden_dim)
        W = rng.normal(0, 1 / np.sqrt(hidden_dim + input_dim), size=(hidden_dim, hidden_dim + input_dim))
        return cls(omega, a, W, np.zeros(hidden_dim))

    def __post_init__(self):
        if np.any(np.asarray(self.omega_tau) <= 0):
            raise ValueError("time constants must be positive")

    def synapse(self, x: np.ndarray, i: np.ndarray) -> np.ndarray:
        """Conductance-style release ``f(x, i) >= 0``."""
        return _sigmoid(self.W @ np.concatenate([x, i]) + self.b)


def ltc_rhs(x: np.ndarray, i: np.ndarray, params: LtcReferenceParams, f: np.ndarray | None = None):
    f = params.synapse(x, i) if f is None else f
    return -(params.omega_tau + f) * x + params.a * f


def ltc_reference_step(x: np.ndarray, i: np.ndarray, dt: float, params: LtcReferenceParams,
                       f: np.ndarray | None = None) -> np.ndarray:
    """Fused semi-implicit Euler step ``(x + dt a f) / (1 + dt (omega_tau + f))``.

    ``f`` overrides the synapse network (used to probe fixed points).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = params.synapse(x, i) if f is None else np.broadcast_to(f, x.shape)
    return (x + dt * params.a * f) / (1.0 + dt * (params.omega_tau + f))
