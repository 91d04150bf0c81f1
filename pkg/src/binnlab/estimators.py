"""Per-unit gradient estimator rules for stochastic binary units.

A unit fires with probability ``F = Phi((h* - theta) / kappa)``. Every local
rule here turns the upstream derivative ``dL/do`` observed at the sampled
output into derivatives with respect to ``h*`` and ``kappa``; the rules only
differ in the scalar weight they put in front of ``dL/do * phi(z) / kappa``.

All functions broadcast over numpy arrays so a whole layer (or a whole batch
of Monte Carlo trials) is handled in one call.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    InvalidParameter,
    clip_probability,
    std_normal_cdf,
    std_normal_pdf,
    tempered_sigmoid,
    tempered_sigmoid_grad,
)


class EstimatorKind(str, enum.Enum):
    ST = "ST"
    IWST = "IWST"
    AGR = "AGR"
    GSST = "GSST"
    REINFORCE = "REINFORCE"
    EXACT = "EXACT"


class PPolicy(str, enum.Enum):
    P0 = "P0"
    P1 = "P1"
    HALF = "HALF"
    ST_MATCH = "ST_MATCH"
    LOW_VAR = "LOW_VAR"


class NotALocalRule(ValueError):
    """Raised when a global estimator is asked for a per-unit backward rule."""


@dataclass(frozen=True)
class EstimatorConfig:
    kind: EstimatorKind = EstimatorKind.ST
    p_policy: Optional[PPolicy] = None
    temperature: Optional[float] = None
    damping: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimatorKind(self.kind))
        if self.p_policy is not None:
            object.__setattr__(self, "p_policy", PPolicy(self.p_policy))
        needs_k = self.kind in (EstimatorKind.AGR, EstimatorKind.GSST) or (
            self.kind is EstimatorKind.IWST and self.damping
        )
        if needs_k and self.temperature is None:
            raise InvalidParameter(f"{self.kind.value} needs a temperature")
        if not needs_k and self.temperature is not None:
            raise InvalidParameter(f"temperature is meaningless for {self.kind.value}")
        if self.temperature is not None and not self.temperature > 0:
            raise InvalidParameter(f"temperature must be positive, got {self.temperature}")
        if (self.kind is EstimatorKind.IWST) != (self.p_policy is not None):
            raise InvalidParameter("p_policy is required for IWST and only for IWST")
        if self.damping and self.kind is not EstimatorKind.IWST:
            # AGR carries its damping inside the surrogate factor already
            raise InvalidParameter("the damping flag applies to IWST only")

    @property
    def label(self) -> str:
        if self.kind is EstimatorKind.IWST:
            tag = f"IWST({self.p_policy.value})"
            return tag + (f"+damp(k={self.temperature:g})" if self.damping else "")
        if self.temperature is not None:
            return f"{self.kind.value}(k={self.temperature:g})"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "EstimatorConfig":
        """Parse labels such as ``ST``, ``IWST:LOW_VAR``, ``AGR:0.2``, ``IWST:P0:damp=1``."""
        parts = text.strip().split(":")
        kind = EstimatorKind(parts[0].upper())
        p_policy = None
        temperature = None
        damping = False
        for part in parts[1:]:
            if part.startswith("damp="):
                damping = True
                temperature = float(part.split("=", 1)[1])
            elif kind is EstimatorKind.IWST and p_policy is None:
                p_policy = PPolicy(part.upper())
            else:
                temperature = float(part)
        return cls(kind, p_policy, temperature, damping)


@dataclass
class UnitTrace:
    """Forward record of one unit, or of a whole array of units."""

    h_star: np.ndarray
    kappa: np.ndarray
    theta: float
    output: np.ndarray
    u: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.asarray(self.kappa) <= 0):
            raise InvalidParameter("kappa must be positive")

    @property
    def z(self):
        return (np.asarray(self.h_star) - self.theta) / np.asarray(self.kappa)


@dataclass
class BackwardSignal:
    d_loss_d_output: np.ndarray
    d_loss_d_hstar: np.ndarray
    d_loss_d_kappa: np.ndarray


def fire_probability(h_star, kappa, theta=0.0):
    """Clipped firing probability ``Phi((h* - theta)/kappa)``."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise InvalidParameter("kappa must be positive")
    return clip_probability(std_normal_cdf((np.asarray(h_star) - theta) / kappa))


def p_policy_value(policy: PPolicy, F):
    policy = PPolicy(policy)
    F = np.asarray(F, dtype=np.float64)
    if policy is PPolicy.P0:
        out = np.zeros_like(F)
    elif policy is PPolicy.P1:
        out = np.ones_like(F)
    elif policy is PPolicy.HALF:
        out = np.full_like(F, 0.5)
    elif policy is PPolicy.ST_MATCH:
        out = F.copy()
    else:
        out = np.where(F > 0.5, 1.0, np.where(F < 0.5, 0.0, 0.5))
    return out if out.ndim else float(out)


def iw_st_weight(output, p, F):
    """Importance ratio ``(p/F)^o ((1-p)/(1-F))^(1-o)``."""
    output = np.asarray(output)
    out = np.where(output == 1, p / F, (1.0 - p) / (1.0 - F))
    return out if out.ndim else float(out)


def agr_terminal_weights(F, k: float):
    """Trapezoid weights ``(w0, w1)`` of the analytic Gumbel-Rao estimator."""
    s0 = tempered_sigmoid(0.0, k)
    w1 = tempered_sigmoid(F, k) - s0
    w0 = s0 - tempered_sigmoid(np.asarray(F) - 1.0, k)
    return w0, w1


def agr_surrogate_factor(output, F, k: float):
    """Closed-form ``E[S_k'(F - 1 + u) | o]`` for ``u ~ Uniform[0, 1]``."""
    w0, w1 = agr_terminal_weights(F, k)
    out = np.where(np.asarray(output) == 1, w1 / F, w0 / (1.0 - F))
    return out if out.ndim else float(out)


def gs_st_surrogate_factor(u, F, k: float):
    return tempered_sigmoid_grad(np.asarray(F) - 1.0 + np.asarray(u), k)


def estimator_weight(config: EstimatorConfig, output, F, u=None):
    """Scalar factor multiplying ``dL/do * phi(z)/kappa`` for one local rule.

    ``F`` must already be clipped.
    """
    kind = config.kind
    if kind is EstimatorKind.ST:
        return np.ones_like(np.asarray(F, dtype=np.float64))
    if kind is EstimatorKind.IWST:
        w = iw_st_weight(output, p_policy_value(config.p_policy, F), F)
        if config.damping:
            w0, w1 = agr_terminal_weights(F, config.temperature)
            w = w * (w0 + w1)
        return w
    if kind is EstimatorKind.AGR:
        return agr_surrogate_factor(output, F, config.temperature)
    if kind is EstimatorKind.GSST:
        if u is None:
            raise InvalidParameter("GS-ST needs the uniform noise of a sampled forward pass")
        return gs_st_surrogate_factor(u, F, config.temperature)
    raise NotALocalRule(f"{kind.value} is not a per-unit rule; use the oracles module")


def local_backward(config: EstimatorConfig, upstream, z, kappa, output, u=None):
    """Vectorised core of :func:`backward_binary_unit`.

    Returns ``(d_loss_d_hstar, d_loss_d_kappa)``.
    """
    F = clip_probability(std_normal_cdf(z))
    w = estimator_weight(config, output, F, u)
    g = w * upstream * std_normal_pdf(z)
    return g / kappa, g * (-z / kappa)


def backward_binary_unit(trace: UnitTrace, upstream, config: EstimatorConfig) -> BackwardSignal:
    z = trace.z
    d_h, d_k = local_backward(config, upstream, z, np.asarray(trace.kappa), trace.output, trace.u)
    return BackwardSignal(np.asarray(upstream), d_h, d_k)
