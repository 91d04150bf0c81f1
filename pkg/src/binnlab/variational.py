"""Gaussian weight posteriors, local reparameterisation and KL regularisers."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .core import InvalidParameter

VARIANCE_FLOOR = 1e-12


class Granularity(str, enum.Enum):
    PER_LAYER = "PER_LAYER"
    PER_NEURON = "PER_NEURON"
    PER_WEIGHT = "PER_WEIGHT"


class PriorMode(str, enum.Enum):
    FIXED = "FIXED"
    EMPIRICAL_BAYES = "EMPIRICAL_BAYES"


class KLMode(str, enum.Enum):
    PER_WEIGHT = "PER_WEIGHT"
    PER_NEURON = "PER_NEURON"


def scale_shape(granularity: Granularity, weight_shape: tuple[int, ...]) -> tuple[int, ...]:
    granularity = Granularity(granularity)
    if granularity is Granularity.PER_LAYER:
        return ()
    if granularity is Granularity.PER_NEURON:
        return (weight_shape[0],)
    return tuple(weight_shape)


def expand_scale(values: np.ndarray, weight_shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a scale tensor at any granularity to the full weight shape."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1 and len(weight_shape) > 1:
        values = values.reshape((-1,) + (1,) * (len(weight_shape) - 1))
    return np.broadcast_to(values, weight_shape)


def reduce_to_scale(full: np.ndarray, granularity: Granularity, batched: bool = False) -> np.ndarray:
    """Adjoint of :func:`expand_scale`: sum a full-shape gradient down to the granularity.

    With ``batched`` the leading axis indexes samples and is kept.
    """
    granularity = Granularity(granularity)
    lead = full.shape[:1] if batched else ()
    body = full.shape[1:] if batched else full.shape
    if granularity is Granularity.PER_LAYER:
        return np.asarray(full.reshape(lead + (-1,)).sum(axis=-1))
    if granularity is Granularity.PER_NEURON:
        return full.reshape(lead + (body[0], -1)).sum(axis=-1)
    return full


@dataclass
class PosteriorParams:
    means: np.ndarray
    log_scales: np.ndarray
    granularity: Granularity = Granularity.PER_LAYER
    recurrent_means: Optional[np.ndarray] = None
    recurrent_log_scales: Optional[np.ndarray] = None

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64)
        expected = scale_shape(self.granularity, self.means.shape)
        if self.log_scales.shape != expected:
            raise ValueError(
                f"{self.granularity.value} scales need shape {expected}, got {self.log_scales.shape}"
            )

    @property
    def sigma(self) -> np.ndarray:
        return expand_scale(np.exp(self.log_scales), self.means.shape)

    @property
    def variance(self) -> np.ndarray:
        return expand_scale(np.exp(2.0 * self.log_scales), self.means.shape)


@dataclass
class PriorParams:
    means: np.ndarray
    variances: np.ndarray
    mode: PriorMode = PriorMode.FIXED

    def __post_init__(self):
        self.mode = PriorMode(self.mode)
        if self.mode is PriorMode.FIXED and np.any(np.asarray(self.variances) <= 0):
            raise InvalidParameter("prior variances must be positive")


@dataclass
class ReparamOutput:
    h_star: np.ndarray
    kappa_sq: np.ndarray

    @property
    def kappa(self) -> np.ndarray:
        return np.sqrt(self.kappa_sq)


def local_reparam_dense(params: PosteriorParams, inputs: np.ndarray) -> ReparamOutput:
    """Mean and variance of ``sum_j w_ij o_j`` under the factorised Gaussian posterior.

    ``inputs`` is ``(n_in,)`` or ``(batch, n_in)`` with entries in {0, 1}.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != params.means.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} does not match weights {params.means.shape}")
    if np.any((x != 0) & (x != 1)):
        raise ValueError("inputs must be binary")
    h_star = x @ params.means.T
    kappa_sq = (x * x) @ params.variance.T + VARIANCE_FLOOR
    return ReparamOutput(h_star, kappa_sq)


def im2col(x: np.ndarray, kh: int, kw: int, padding: int = 0) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, H_out*W_out, C*kh*kw)`` patches, stride 1."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, padding: int = 0):
    """Adjoint of :func:`im2col` (scatter-add patches back onto the image)."""
    b, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, hp, wp))
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di:di + ho, dj:dj + wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv_output_hw(h: int, w: int, kh: int, kw: int, padding: int) -> tuple[int, int]:
    return h + 2 * padding - kh + 1, w + 2 * padding - kw + 1


def local_reparam_conv(mean_kernel, scale_kernel, input_map, padding: int = 0) -> ReparamOutput:
    """Per-position local reparameterisation of a stride-1 2D convolution.

    Kernels are ``(C_out, C_in, kh, kw)`` and are applied as a cross-correlation
    (the deep-learning convention). ``input_map`` is ``(C_in, H, W)`` or
    ``(B, C_in, H, W)``. Each output position gets its own independent weight
    sample, so only the variance map is needed here.
    """
    mean_kernel = np.asarray(mean_kernel, dtype=np.float64)
    scale_kernel = np.asarray(scale_kernel, dtype=np.float64)
    x = np.asarray(input_map, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if mean_kernel.ndim != 4 or scale_kernel.shape != mean_kernel.shape:
        raise ValueError("kernels must both be (C_out, C_in, kh, kw)")
    if x.ndim != 4 or x.shape[1] != mean_kernel.shape[1]:
        raise ValueError(f"input map {x.shape} does not match kernel {mean_kernel.shape}")
    c_out, _, kh, kw = mean_kernel.shape
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], kh, kw, padding)
    cols = im2col(x, kh, kw, padding)
    h_star = cols @ mean_kernel.reshape(c_out, -1).T
    kappa_sq = (cols * cols) @ (scale_kernel**2).reshape(c_out, -1).T + VARIANCE_FLOOR
    h_star = h_star.transpose(0, 2, 1).reshape(x.shape[0], c_out, ho, wo)
    kappa_sq = kappa_sq.transpose(0, 2, 1).reshape(x.shape[0], c_out, ho, wo)
    if squeeze:
        h_star, kappa_sq = h_star[0], kappa_sq[0]
    return ReparamOutput(h_star, kappa_sq)


def kl_gaussian(m, sigma, alpha, tau_sq):
    """KL( N(m, sigma^2) || N(alpha, tau_sq) ) in nats."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tau_sq = np.asarray(tau_sq, dtype=np.float64)
    if np.any(sigma <= 0) or np.any(tau_sq <= 0):
        raise InvalidParameter("scales must be positive")
    out = 0.5 * np.log(tau_sq) - np.log(sigma) + ((m - alpha) ** 2 + sigma**2 - tau_sq) / (2.0 * tau_sq)
    return out if np.ndim(out) else float(out)


def empirical_bayes_tau_sq(m, sigma):
    """Prior variance ``(m^2 + sigma^2)/2`` used by the empirical-Bayes prior."""
    return (np.asarray(m) ** 2 + np.asarray(sigma) ** 2) / 2.0


def kl_per_weight(m, sigma):
    """``ln(sqrt(m^2 + sigma^2) / (2 sigma)) = 0.5 ln(1 + (m/sigma)^2) - ln 2``.

    This is the KL against the prior ``N(0, m^2 + sigma^2)`` shifted by
    ``-ln 2``; the ELBO regulariser drops the constant (see :func:`kl_per_weight_term`).
    """
    out = kl_per_weight_term(m, sigma) - np.log(2.0)
    return out if np.ndim(out) else float(out)


def kl_per_weight_term(m, sigma):
    """``0.5 ln(1 + (m/sigma)^2)``: the constant-free per-weight regulariser, zero at ``m = 0``."""
    r = np.asarray(m) / np.asarray(sigma)
    out = 0.5 * np.log1p(r * r)
    return out if np.ndim(out) else float(out)


def kl_per_weight_grad(m, sigma):
    """Gradients of :func:`kl_per_weight_term` w.r.t. ``m`` and ``log sigma``."""
    m = np.asarray(m, dtype=np.float64)
    s2 = np.asarray(sigma, dtype=np.float64) ** 2
    denom = m * m + s2
    return m / denom, -(m * m) / denom


def kl_per_neuron(h_star, kappa):
    """``0.5 ln(1 + (h*/kappa)^2)`` for the summed-active-weight posterior."""
    return kl_per_weight_term(h_star, kappa)


def kl_per_neuron_grad(h_star, kappa):
    """Gradients of :func:`kl_per_neuron` w.r.t. ``h*`` and ``kappa``."""
    r = np.asarray(h_star) / np.asarray(kappa)
    c = r / (1.0 + r * r)
    return c / kappa, -c * r / kappa


def kl_fixed_prior(params: PosteriorParams, prior: PriorParams) -> float:
    """Full Gaussian KL of a posterior against a prior.

    In ``EMPIRICAL_BAYES`` mode the prior variance of each weight is replaced
    by ``(m^2 + sigma^2)/2`` and ``prior.variances`` is ignored.
    """
    sigma = params.sigma
    if prior.mode is PriorMode.EMPIRICAL_BAYES:
        tau_sq = empirical_bayes_tau_sq(params.means, sigma)
    else:
        tau_sq = np.broadcast_to(prior.variances, params.means.shape)
    return float(np.sum(kl_gaussian(params.means, sigma, np.broadcast_to(prior.means, params.means.shape), tau_sq)))


def elbo_regularizer(
    weight_terms: Iterable[tuple[np.ndarray, np.ndarray]],
    neuron_terms: Optional[Iterable[np.ndarray]],
    mode: KLMode,
    lam: float,
) -> float:
    """Scaled KL term of the ELBO.

    ``weight_terms`` yields ``(means, sigma)`` pairs (full weight shape).
    ``neuron_terms`` yields arrays of signal-to-noise ratios ``(h* - theta)/kappa``
    whose leading axis is the batch; every other axis (neurons, time steps)
    is summed and the batch is averaged.
    """
    mode = KLMode(mode)
    if lam == 0:
        return 0.0
    total = 0.0
    if mode is KLMode.PER_WEIGHT:
        for m, s in weight_terms:
            total += float(np.sum(kl_per_weight_term(m, s)))
    else:
        if neuron_terms is None:
            raise ValueError("PER_NEURON KL needs forward traces")
        for ratio in neuron_terms:
            ratio = np.asarray(ratio)
            total += float(np.sum(0.5 * np.log1p(ratio * ratio)) / ratio.shape[0])
    return lam * total


@dataclass
class ScaleInit:
    """Initial posterior scale ``sigma0 = coef / sqrt(fan_in)``."""

    coef: float = 0.5

    def __call__(self, fan_in: int) -> float:
        return self.coef / math.sqrt(fan_in)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0):
    """Kaiming-uniform with the ``a = sqrt(5)`` convention: bound ``gain / sqrt(fan_in)``."""
    bound = gain / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
