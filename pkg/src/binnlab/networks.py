"""Stochastic binary MLPs/CNNs and recurrent LIF networks with hand-written backprop.

Layout conventions: batch first. Feedforward activations are ``(B, n)`` (or
``(B, C, H, W)`` for conv layers); spiking inputs are ``(B, T, channels)``.
Parameters live in a flat ``{name: ndarray}`` mapping per network so the
optimiser, checkpoints and finite-difference oracles can all address them
uniformly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .core import RngStream, std_normal_cdf
from .estimators import EstimatorConfig, local_backward
from .variational import (
    VARIANCE_FLOOR,
    Granularity,
    KLMode,
    col2im,
    conv_output_hw,
    expand_scale,
    im2col,
    kaiming_uniform,
    kl_per_neuron_grad,
    reduce_to_scale,
    scale_shape,
)


class Variant(str, enum.Enum):
    """Training variants.

    FULL samples every unit and learns the posterior scales. MFA thresholds
    the noiseless potential (no sampling) and still learns the scales. FPV is
    MFA with the scales frozen at ``fpv_sigma``; NKL is FPV without the KL
    term. The noise level still sets the backward width ``phi(z)/kappa``.
    """

    FULL = "FULL"
    MFA = "MFA"
    FPV = "FPV"
    NKL = "NKL"

    @property
    def sampled(self) -> bool:
        return self is Variant.FULL


WEIGHTS = "weights"
SCALES = "scales"
# The identity path adds (o - 1/2) to h*: with zero inner weights a residual
# unit then reproduces its input exactly under a zero threshold instead of
# sitting on the threshold whenever the input is silent.
IDENTITY_OFFSET = 0.5


@dataclass
class LayerSpec:
    kind: str  # dense | conv | lif | readout
    width: int = 0  # units (dense/lif), channels (conv), classes (readout)
    residual: bool = False
    affine: bool = False
    kernel: int = 3
    padding: int = 1
    recurrent: bool = True
    theta: Optional[float] = None
    init_gain: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("dense", "conv", "lif", "readout"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.width <= 0:
            raise ValueError(f"{self.kind} layer needs a positive width")


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list
    variant: Variant = Variant.FULL
    fpv_sigma: Optional[float] = None
    theta: float = 0.0
    beta: float = 0.9
    readout_beta: float = 0.9
    timesteps: int = 1
    granularity: Granularity = Granularity.PER_LAYER
    base_noise: float = 0.0
    init_gain: float = 1.0
    sigma0_coef: float = 0.5

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.granularity = Granularity(self.granularity)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.readout_beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.fpv_sigma is not None and not self.fpv_sigma > 0:
            raise ValueError("fpv_sigma must be positive")
        if self.base_noise < 0:
            raise ValueError("base_noise is a variance and must be >= 0")
        if not self.layers or self.layers[-1].kind != "readout":
            raise ValueError("the last layer must be a readout")
        if any(l.kind == "readout" for l in self.layers[:-1]):
            raise ValueError("only the last layer may be a readout")
        kinds = {l.kind for l in self.layers[:-1]}
        if "lif" in kinds and kinds - {"lif"}:
            raise ValueError("spiking networks are built from LIF layers only")

    @property
    def spiking(self) -> bool:
        return any(l.kind == "lif" for l in self.layers)

    @property
    def sampled(self) -> bool:
        return self.variant.sampled

    @property
    def learn_scales(self) -> bool:
        return self.variant in (Variant.FULL, Variant.MFA)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["granularity"] = self.granularity.value
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def residual_mlp_spec(
    n_inputs: int, width: int, n_blocks: int, n_classes: int, block_init_gain: Optional[float] = None, **kw
) -> NetworkSpec:
    layers = [LayerSpec("dense", width, affine=True)]
    layers += [
        LayerSpec("dense", width, residual=True, affine=True, init_gain=block_init_gain) for _ in range(n_blocks)
    ]
    layers.append(LayerSpec("readout", n_classes))
    return NetworkSpec((n_inputs,), layers, **kw)


def mlp_spec(n_inputs: int, widths: list, n_classes: int, **kw) -> NetworkSpec:
    layers = [LayerSpec("dense", w) for w in widths] + [LayerSpec("readout", n_classes)]
    return NetworkSpec((n_inputs,), layers, **kw)


def spiking_spec(n_channels: int, widths: list, n_classes: int, recurrent: bool = True, **kw) -> NetworkSpec:
    kw.setdefault("theta", 1.0)
    layers = [LayerSpec("lif", w, recurrent=recurrent) for w in widths] + [LayerSpec("readout", n_classes)]
    return NetworkSpec((n_channels,), layers, **kw)


# ---------------------------------------------------------------------------
# layers


def _gain(spec: NetworkSpec, ls: LayerSpec) -> float:
    return spec.init_gain if ls.init_gain is None else ls.init_gain


class _StochasticLayer:
    """Shared parameter plumbing for layers whose units are Bernoulli."""

    prefix: str
    granularity: Granularity
    theta: float

    def _init_scale(self, net: "Network", fan_in: int, weight_shape: tuple) -> np.ndarray:
        spec = net.spec
        if spec.learn_scales or spec.fpv_sigma is None:
            sigma = spec.sigma0_coef / math.sqrt(fan_in)
        else:
            sigma = spec.fpv_sigma
        return np.full(scale_shape(self.granularity, weight_shape), math.log(sigma))


class DenseBinary(_StochasticLayer):
    def __init__(self, net: "Network", index: int, n_in: int, ls: LayerSpec, rng):
        spec = net.spec
        self.prefix = f"{index}."
        self.granularity = spec.granularity
        self.theta = spec.theta if ls.theta is None else ls.theta
        self.residual = ls.residual
        self.affine = ls.affine
        self.n_in, self.n_out = n_in, ls.width
        if self.residual and n_in != ls.width:
            raise ValueError(f"residual layer {index} needs equal widths, got {n_in} -> {ls.width}")
        shape = (ls.width, n_in)
        p = net.params
        p[self.prefix + "mean"] = kaiming_uniform(rng, shape, n_in, _gain(spec, ls))
        p[self.prefix + "log_scale"] = self._init_scale(net, n_in, shape)
        net.groups[self.prefix + "mean"] = WEIGHTS
        net.groups[self.prefix + "log_scale"] = SCALES
        if self.affine:
            p[self.prefix + "gain"] = np.ones(ls.width)
            p[self.prefix + "bias"] = np.zeros(ls.width)
            net.groups[self.prefix + "gain"] = WEIGHTS
            net.groups[self.prefix + "bias"] = WEIGHTS
        self.out_shape = (ls.width,)

    def mean_names(self):
        return [self.prefix + "mean"]

    def weight_terms(self, p):
        m = p[self.prefix + "mean"]
        return [(m, expand_scale(np.exp(p[self.prefix + "log_scale"]), m.shape))]

    def stats(self, p, x):
        m = p[self.prefix + "mean"]
        s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
        lin = x @ m.T
        var = x @ s2.T  # x is binary, so x**2 == x
        if self.affine:
            g = p[self.prefix + "gain"]
            h, k2 = g * lin + p[self.prefix + "bias"], g * g * var
        else:
            h, k2 = lin, var
        if self.residual:
            h = h + (x - IDENTITY_OFFSET)
        return h, k2 + VARIANCE_FLOOR, (lin, var)

    def param_grads(self, p, x, dh, dk2, aux, per_sample=False):
        m = p[self.prefix + "mean"]
        lsc = p[self.prefix + "log_scale"]
        s2 = expand_scale(np.exp(2.0 * lsc), m.shape)
        lin, var = aux
        if self.affine:
            g = p[self.prefix + "gain"]
            dh_lin, dk2_var = dh * g, dk2 * g * g
        else:
            dh_lin, dk2_var = dh, dk2
        out = {}
        if per_sample:
            out[self.prefix + "mean"] = np.einsum("bo,bi->boi", dh_lin, x)
            ds2 = np.einsum("bo,bi->boi", dk2_var, x)
            out[self.prefix + "log_scale"] = reduce_to_scale(ds2 * (2.0 * s2), self.granularity, batched=True)
            if self.affine:
                out[self.prefix + "gain"] = dh * lin + dk2 * 2.0 * g * var
                out[self.prefix + "bias"] = dh.copy()
        else:
            out[self.prefix + "mean"] = dh_lin.T @ x
            out[self.prefix + "log_scale"] = reduce_to_scale((dk2_var.T @ x) * 2.0 * s2, self.granularity)
            if self.affine:
                out[self.prefix + "gain"] = np.sum(dh * lin + dk2 * 2.0 * g * var, axis=0)
                out[self.prefix + "bias"] = dh.sum(axis=0)
        return out

    def input_grad(self, p, x, dh, dk2, kappa_path=True):
        m = p[self.prefix + "mean"]
        dh_lin = dh * p[self.prefix + "gain"] if self.affine else dh
        dx = dh_lin @ m
        if kappa_path:
            s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
            dk2_var = dk2 * p[self.prefix + "gain"] ** 2 if self.affine else dk2
            dx = dx + dk2_var @ s2
        if self.residual:
            dx = dx + dh
        return dx


class ConvBinary(_StochasticLayer):
    """Stride-1 2D conv layer with independent weight noise at every position."""

    def __init__(self, net: "Network", index: int, in_shape: tuple, ls: LayerSpec, rng):
        spec = net.spec
        c_in, h, w = in_shape
        self.prefix = f"{index}."
        self.granularity = spec.granularity
        self.theta = spec.theta if ls.theta is None else ls.theta
        self.k, self.pad = ls.kernel, ls.padding
        self.residual, self.affine = ls.residual, ls.affine
        ho, wo = conv_output_hw(h, w, self.k, self.k, self.pad)
        self.in_shape, self.out_shape = in_shape, (ls.width, ho, wo)
        if self.residual and self.out_shape != in_shape:
            raise ValueError(f"residual conv layer {index} changes shape {in_shape} -> {self.out_shape}")
        shape = (ls.width, c_in, self.k, self.k)
        fan_in = c_in * self.k * self.k
        p = net.params
        p[self.prefix + "mean"] = kaiming_uniform(rng, shape, fan_in, _gain(spec, ls))
        p[self.prefix + "log_scale"] = self._init_scale(net, fan_in, shape)
        net.groups[self.prefix + "mean"] = WEIGHTS
        net.groups[self.prefix + "log_scale"] = SCALES
        if self.affine:
            p[self.prefix + "gain"] = np.ones(ls.width)
            p[self.prefix + "bias"] = np.zeros(ls.width)
            net.groups[self.prefix + "gain"] = WEIGHTS
            net.groups[self.prefix + "bias"] = WEIGHTS

    def mean_names(self):
        return [self.prefix + "mean"]

    def weight_terms(self, p):
        m = p[self.prefix + "mean"]
        return [(m, expand_scale(np.exp(p[self.prefix + "log_scale"]), m.shape))]

    def _to_map(self, a, b):
        c, ho, wo = self.out_shape
        return a.transpose(0, 2, 1).reshape(b, c, ho, wo)

    def _from_map(self, a):
        return a.reshape(a.shape[0], a.shape[1], -1).transpose(0, 2, 1)

    def stats(self, p, x):
        m = p[self.prefix + "mean"]
        s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
        cols = im2col(x, self.k, self.k, self.pad)
        c_out = m.shape[0]
        lin = self._to_map(cols @ m.reshape(c_out, -1).T, x.shape[0])
        var = self._to_map(cols @ s2.reshape(c_out, -1).T, x.shape[0])
        if self.affine:
            g = p[self.prefix + "gain"][:, None, None]
            h, k2 = g * lin + p[self.prefix + "bias"][:, None, None], g * g * var
        else:
            h, k2 = lin, var
        if self.residual:
            h = h + (x - IDENTITY_OFFSET)
        return h, k2 + VARIANCE_FLOOR, (lin, var, cols)

    def param_grads(self, p, x, dh, dk2, aux, per_sample=False):
        if per_sample:
            raise NotImplementedError("per-sample gradients are only implemented for dense layers")
        m = p[self.prefix + "mean"]
        s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
        lin, var, cols = aux
        if self.affine:
            g = p[self.prefix + "gain"][:, None, None]
            dh_lin, dk2_var = dh * g, dk2 * g * g
        else:
            dh_lin, dk2_var = dh, dk2
        c_out = m.shape[0]
        a = self._from_map(dh_lin).reshape(-1, c_out)
        b = self._from_map(dk2_var).reshape(-1, c_out)
        flat_cols = cols.reshape(-1, cols.shape[-1])
        out = {
            self.prefix + "mean": (a.T @ flat_cols).reshape(m.shape),
            self.prefix + "log_scale": reduce_to_scale((b.T @ flat_cols).reshape(m.shape) * 2.0 * s2, self.granularity),
        }
        if self.affine:
            g = p[self.prefix + "gain"][:, None, None]
            out[self.prefix + "gain"] = np.sum(dh * lin + dk2 * 2.0 * g * var, axis=(0, 2, 3))
            out[self.prefix + "bias"] = dh.sum(axis=(0, 2, 3))
        return out

    def input_grad(self, p, x, dh, dk2, kappa_path=True):
        m = p[self.prefix + "mean"]
        c_out = m.shape[0]
        if self.affine:
            g = p[self.prefix + "gain"][:, None, None]
            dh_lin, dk2_var = dh * g, dk2 * g * g
        else:
            dh_lin, dk2_var = dh, dk2
        dcols = self._from_map(dh_lin) @ m.reshape(c_out, -1)
        if kappa_path:
            s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
            dcols = dcols + self._from_map(dk2_var) @ s2.reshape(c_out, -1)
        dx = col2im(dcols, x.shape, self.k, self.k, self.pad)
        if self.residual:
            dx = dx + dh
        return dx


class Readout:
    """Deterministic linear read-out on the last binary layer (posterior means)."""

    def __init__(self, net: "Network", index: int, n_in: int, n_classes: int, rng):
        self.prefix = f"{index}."
        p = net.params
        p[self.prefix + "mean"] = kaiming_uniform(rng, (n_classes, n_in), n_in, net.spec.init_gain)
        net.groups[self.prefix + "mean"] = WEIGHTS
        if not net.spec.spiking:
            p[self.prefix + "bias"] = np.zeros(n_classes)
            net.groups[self.prefix + "bias"] = WEIGHTS

    def forward(self, p, x):
        x = x.reshape(x.shape[0], -1)
        return x @ p[self.prefix + "mean"].T + p[self.prefix + "bias"]

    def backward(self, p, x, dlogits, per_sample=False):
        xf = x.reshape(x.shape[0], -1)
        if per_sample:
            grads = {
                self.prefix + "mean": np.einsum("bc,bi->bci", dlogits, xf),
                self.prefix + "bias": dlogits.copy(),
            }
        else:
            grads = {self.prefix + "mean": dlogits.T @ xf, self.prefix + "bias": dlogits.sum(axis=0)}
        return grads, (dlogits @ p[self.prefix + "mean"]).reshape(x.shape)


class LifLayer(_StochasticLayer):
    def __init__(self, net: "Network", index: int, n_in: int, ls: LayerSpec, rng):
        spec = net.spec
        self.prefix = f"{index}."
        self.granularity = spec.granularity
        self.theta = spec.theta if ls.theta is None else ls.theta
        self.beta = spec.beta
        self.base_noise = spec.base_noise
        self.recurrent = ls.recurrent
        self.n_in, self.n_out = n_in, ls.width
        self.mask = 1.0 - np.eye(ls.width)
        p = net.params
        shape = (ls.width, n_in)
        p[self.prefix + "mean"] = kaiming_uniform(rng, shape, n_in, _gain(spec, ls))
        p[self.prefix + "log_scale"] = self._init_scale(net, n_in, shape)
        net.groups[self.prefix + "mean"] = WEIGHTS
        net.groups[self.prefix + "log_scale"] = SCALES
        if self.recurrent:
            rshape = (ls.width, ls.width)
            fan = max(ls.width - 1, 1)
            p[self.prefix + "rec_mean"] = kaiming_uniform(rng, rshape, fan, _gain(spec, ls)) * self.mask
            p[self.prefix + "rec_log_scale"] = self._init_scale(net, fan, rshape)
            net.groups[self.prefix + "rec_mean"] = WEIGHTS
            net.groups[self.prefix + "rec_log_scale"] = SCALES

    def mean_names(self):
        names = [self.prefix + "mean"]
        if self.recurrent:
            names.append(self.prefix + "rec_mean")
        return names

    def weight_terms(self, p):
        m = p[self.prefix + "mean"]
        terms = [(m, expand_scale(np.exp(p[self.prefix + "log_scale"]), m.shape))]
        if self.recurrent:
            r = p[self.prefix + "rec_mean"]
            nu = expand_scale(np.exp(p[self.prefix + "rec_log_scale"]), r.shape)
            off = self.mask.astype(bool)
            terms.append((r[off], nu[off]))
        return terms

    def matrices(self, p):
        m = p[self.prefix + "mean"]
        s2 = expand_scale(np.exp(2.0 * p[self.prefix + "log_scale"]), m.shape)
        if self.recurrent:
            r = p[self.prefix + "rec_mean"] * self.mask
            nu2 = expand_scale(np.exp(2.0 * p[self.prefix + "rec_log_scale"]), r.shape) * self.mask
        else:
            r = nu2 = None
        return m, s2, r, nu2


@dataclass
class LifState:
    h_star: np.ndarray
    kappa_sq: np.ndarray
    prev_outputs: np.ndarray

    @classmethod
    def zeros(cls, batch: int, width: int) -> "LifState":
        z = np.zeros((batch, width))
        return cls(z, z.copy(), z.copy())


# ---------------------------------------------------------------------------
# networks


class Network:
    """A spec plus its parameters."""

    def __init__(self, spec: NetworkSpec, params: Optional[dict] = None, seed: int = 0):
        self.spec = spec
        self.params: dict = {}
        self.groups: dict = {}
        rng = RngStream(seed, (0xC0FFEE,)).generator
        self.layers: list = []
        shape = spec.input_shape
        for i, ls in enumerate(spec.layers):
            if ls.kind == "dense":
                n_in = int(np.prod(shape))
                layer = DenseBinary(self, i, n_in, ls, rng)
            elif ls.kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv layers need a (C, H, W) input shape")
                layer = ConvBinary(self, i, shape, ls, rng)
            elif ls.kind == "lif":
                layer = LifLayer(self, i, int(np.prod(shape)), ls, rng)
                shape = (ls.width,)
                self.layers.append(layer)
                continue
            else:
                layer = Readout(self, i, int(np.prod(shape)), ls.width, rng)
                self.readout = layer
                continue
            if ls.kind == "dense" and len(shape) != 1:
                raise ValueError("dense layers after conv layers are not supported; use the readout")
            shape = layer.out_shape
            self.layers.append(layer)
        if params is not None:
            for k in self.params:
                if k not in params:
                    raise KeyError(f"missing parameter {k}")
                if np.shape(params[k]) != self.params[k].shape:
                    raise ValueError(f"parameter {k} has shape {np.shape(params[k])}, want {self.params[k].shape}")
                self.params[k] = np.array(params[k], dtype=np.float64)
            extra = set(params) - set(self.params)
            if extra:
                raise KeyError(f"unknown parameters {sorted(extra)}")

    @property
    def n_stochastic_units(self) -> int:
        if self.spec.spiking:
            return sum(l.n_out for l in self.layers) * self.spec.timesteps
        return sum(int(np.prod(l.out_shape)) for l in self.layers)

    def trainable(self, name: str) -> bool:
        return self.groups[name] == WEIGHTS or self.spec.learn_scales

    def weight_terms(self):
        out = []
        for layer in self.layers:
            out.extend(layer.weight_terms(self.params))
        return out

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()})


@dataclass
class LayerTrace:
    x: np.ndarray
    h_star: np.ndarray
    kappa: np.ndarray
    z: np.ndarray
    output: np.ndarray
    u: Optional[np.ndarray]
    aux: tuple = field(default=(), repr=False)
    theta: float = 0.0


@dataclass
class ForwardTrace:
    layers: list
    readout_input: np.ndarray
    logits: np.ndarray
    spiking: bool = False
    # spiking only: per-layer dicts of (T, B, n) arrays
    steps: Optional[list] = None

    def neuron_ratios(self):
        """Signal-to-noise ratios ``(h* - theta)/kappa`` with the batch axis first."""
        if not self.spiking:
            return [t.z.reshape(t.z.shape[0], -1) for t in self.layers]
        return [np.swapaxes(s["z"], 0, 1) for s in self.steps]


def _sample(z, rng: Optional[RngStream], sampled: bool):
    if not sampled:
        return (z > 0).astype(np.float64), None
    u = rng.uniform(z.shape)
    return (u > 1.0 - std_normal_cdf(z)).astype(np.float64), u


def binary_dense_forward(net: Network, index: int, inputs, variant: Variant, rng: Optional[RngStream]):
    """One stochastic layer: local reparameterisation, then sample (or threshold)."""
    layer = net.layers[index]
    x = np.asarray(inputs, dtype=np.float64)
    if np.any((x != 0) & (x != 1)):
        raise ValueError("binary layers take 0/1 inputs")
    h, k2, aux = layer.stats(net.params, x)
    kappa = np.sqrt(k2)
    z = (h - layer.theta) / kappa
    o, u = _sample(z, rng, Variant(variant).sampled)
    return o, LayerTrace(x, h, kappa, z, o, u, aux, layer.theta)


def residual_block_forward(net: Network, index: int, inputs, variant: Variant, rng):
    if not net.layers[index].residual:
        raise ValueError(f"layer {index} is not a residual block")
    return binary_dense_forward(net, index, inputs, variant, rng)


def lif_step(net: Network, index: int, state: LifState, inputs_t, variant: Variant, rng: Optional[RngStream]):
    """Advance one LIF layer by one time step using the (h*, kappa^2) recursions.

    Returns ``(outputs_t, new_state, record)`` where ``record`` holds the
    quantities the backward pass needs.
    """
    layer = net.layers[index]
    x = np.asarray(inputs_t, dtype=np.float64)
    if x.shape[-1] != layer.n_in or state.h_star.shape[-1] != layer.n_out:
        raise ValueError("state or input shape does not match the layer")
    m, s2, r, nu2 = layer.matrices(net.params)
    o_prev = state.prev_outputs
    h = layer.beta * state.h_star + x @ m.T - layer.theta * o_prev
    k2 = layer.beta**2 * state.kappa_sq + x @ s2.T
    if layer.recurrent:
        h = h + o_prev @ r.T
        k2 = k2 + o_prev @ nu2.T
    kappa = np.sqrt(k2 + layer.base_noise + VARIANCE_FLOOR)
    z = (h - layer.theta) / kappa
    o, u = _sample(z, rng, Variant(variant).sampled)
    record = dict(x=x, o_prev=o_prev, h=h, kappa=kappa, z=z, o=o, u=u)
    return o, LifState(h, k2, o), record


def readout_logits(net: Network, spikes) -> np.ndarray:
    """Sum over time of a leaky, non-spiking integrator driven by ``spikes`` ``(B, T, n)``."""
    p = net.params
    w = p[net.readout.prefix + "mean"]
    v = np.zeros((spikes.shape[0], w.shape[0]))
    logits = np.zeros_like(v)
    for t in range(spikes.shape[1]):
        v = net.spec.readout_beta * v + spikes[:, t] @ w.T
        logits += v
    return logits


def network_forward(net: Network, batch, rng: Optional[RngStream] = None, variant: Optional[Variant] = None):
    """Forward pass under the network's variant, or under ``variant`` if given.

    Passing ``variant=FULL`` samples any network with its current scales
    (fixed ones included). ``rng`` may be ``None`` for deterministic variants.
    """
    variant = net.spec.variant if variant is None else Variant(variant)
    if variant.sampled and rng is None:
        raise ValueError("sampled forward passes need an RngStream")
    x = np.asarray(batch, dtype=np.float64)
    if net.spec.spiking:
        return _spiking_forward(net, x, rng, variant)
    traces = []
    for i in range(len(net.layers)):
        x, tr = binary_dense_forward(net, i, x, variant, None if rng is None else rng.child(i))
        traces.append(tr)
    logits = net.readout.forward(net.params, x)
    return logits, ForwardTrace(traces, x, logits)


def _spiking_forward(net: Network, x, rng, variant):
    b, T = x.shape[0], x.shape[1]
    if T != net.spec.timesteps:
        raise ValueError(f"input has {T} time steps, spec says {net.spec.timesteps}")
    states = [LifState.zeros(b, l.n_out) for l in net.layers]
    streams = [None if rng is None else rng.child(i) for i in range(len(net.layers))]
    recs = [{k: [] for k in ("x", "o_prev", "h", "kappa", "z", "o", "u")} for _ in net.layers]
    top = []
    for t in range(T):
        inp = x[:, t]
        for i in range(len(net.layers)):
            inp, states[i], rec = lif_step(net, i, states[i], inp, variant, streams[i])
            for k, v in rec.items():
                recs[i][k].append(v)
        top.append(inp)
    steps = []
    for r in recs:
        steps.append({k: (None if v[0] is None else np.stack(v)) for k, v in r.items()})
    spikes = np.stack(top, axis=1)
    logits = readout_logits(net, spikes)
    return logits, ForwardTrace([], spikes, logits, spiking=True, steps=steps)


def _add(grads: dict, new: dict):
    for k, v in new.items():
        grads[k] = grads[k] + v if k in grads else v


def network_backward(
    net: Network,
    trace: ForwardTrace,
    loss_grad,
    estimator: EstimatorConfig,
    kl_lambda: float = 0.0,
    kl_mode: KLMode = KLMode.PER_WEIGHT,
    per_sample: bool = False,
    kappa_path: bool = True,
    mask_frozen: bool = True,
) -> dict:
    """Backward pass composing the per-unit estimator rule at every unit.

    ``loss_grad`` is ``dL/dlogits`` per sample (already carrying any 1/B of a
    batch mean). Gradients are summed over the batch unless ``per_sample``.
    With ``kl_mode=PER_NEURON`` and ``kl_lambda > 0`` the batch-averaged
    per-neuron KL is differentiated along the same paths; the per-weight KL
    needs no backward pass (see :func:`kl_weight_grads`).
    ``kappa_path=False`` stops gradients flowing into upstream outputs through
    the noise variance (ablation switch). Gradients of frozen parameters (the
    fixed scales of FPV/NKL) are zeroed unless ``mask_frozen`` is false.
    """
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != trace.logits.shape:
        raise ValueError(f"loss gradient {loss_grad.shape} does not match logits {trace.logits.shape}")
    neuron_kl = kl_lambda if KLMode(kl_mode) is KLMode.PER_NEURON else 0.0
    if trace.spiking:
        if per_sample:
            raise NotImplementedError("per-sample gradients are only implemented for feedforward networks")
        grads = _spiking_backward(net, trace, loss_grad, estimator, neuron_kl, kappa_path)
        return _mask_frozen(net, grads) if mask_frozen else grads
    if len(trace.layers) != len(net.layers):
        raise ValueError("trace does not come from this network")
    p = net.params
    grads, d_o = net.readout.backward(p, trace.readout_input, loss_grad, per_sample)
    batch = loss_grad.shape[0]
    for layer, tr in zip(reversed(net.layers), reversed(trace.layers)):
        dh, dk = local_backward(estimator, d_o, tr.z, tr.kappa, tr.output, tr.u)
        if neuron_kl:
            gh, gk = kl_per_neuron_grad(tr.h_star - tr.theta, tr.kappa)
            dh = dh + (neuron_kl / batch) * gh
            dk = dk + (neuron_kl / batch) * gk
        dk2 = dk / (2.0 * tr.kappa)
        _add(grads, layer.param_grads(p, tr.x, dh, dk2, tr.aux, per_sample))
        d_o = layer.input_grad(p, tr.x, dh, dk2, kappa_path)
    return _mask_frozen(net, grads) if mask_frozen else grads


def _mask_frozen(net: Network, grads: dict) -> dict:
    for k in grads:
        if not net.trainable(k):
            grads[k] = np.zeros_like(grads[k])
    return grads


def _spiking_backward(net, trace, dlogits, estimator, neuron_kl, kappa_path):
    p = net.params
    spec = net.spec
    T = spec.timesteps
    batch = dlogits.shape[0]
    ro = net.readout
    w_ro = p[ro.prefix + "mean"]
    spikes = trace.readout_input
    grads = {ro.prefix + "mean": np.zeros_like(w_ro)}
    # logits = sum_t v_t with v_t = beta_r v_{t-1} + W s_t, so dL/dv_t = sum_{t'>=t} beta_r^(t'-t) dL/dlogits
    vbar = np.zeros_like(dlogits)
    top_grad = [None] * T
    for t in reversed(range(T)):
        vbar = dlogits + spec.readout_beta * vbar
        grads[ro.prefix + "mean"] += vbar.T @ spikes[:, t]
        top_grad[t] = vbar @ w_ro

    L = len(net.layers)
    mats = [layer.matrices(p) for layer in net.layers]
    acc = []
    for layer, (m, s2, r, nu2) in zip(net.layers, mats):
        a = {"mean": np.zeros_like(m), "s2": np.zeros_like(m)}
        if layer.recurrent:
            a["rec"] = np.zeros_like(r)
            a["nu2"] = np.zeros_like(r)
        acc.append(a)
    hbar_next = [np.zeros((batch, l.n_out)) for l in net.layers]
    kbar_next = [np.zeros((batch, l.n_out)) for l in net.layers]
    rec_grad = [np.zeros((batch, l.n_out)) for l in net.layers]

    for t in reversed(range(T)):
        d_o = top_grad[t]
        for i in reversed(range(L)):
            layer = net.layers[i]
            st = trace.steps[i]
            m, s2, r, nu2 = mats[i]
            up = d_o + rec_grad[i]
            z, kappa = st["z"][t], st["kappa"][t]
            u = None if st["u"] is None else st["u"][t]
            dh, dk = local_backward(estimator, up, z, kappa, st["o"][t], u)
            if neuron_kl:
                gh, gk = kl_per_neuron_grad(st["h"][t] - layer.theta, kappa)
                dh = dh + (neuron_kl / batch) * gh
                dk = dk + (neuron_kl / batch) * gk
            hbar = dh + layer.beta * hbar_next[i]
            kbar = dk / (2.0 * kappa) + layer.beta**2 * kbar_next[i]
            x_t, o_prev = st["x"][t], st["o_prev"][t]
            acc[i]["mean"] += hbar.T @ x_t
            acc[i]["s2"] += kbar.T @ x_t
            g_prev = -layer.theta * hbar
            if layer.recurrent:
                acc[i]["rec"] += hbar.T @ o_prev
                acc[i]["nu2"] += kbar.T @ o_prev
                g_prev = g_prev + hbar @ r
                if kappa_path:
                    g_prev = g_prev + kbar @ nu2
            rec_grad[i] = g_prev
            d_o = hbar @ m
            if kappa_path:
                d_o = d_o + kbar @ s2
            hbar_next[i], kbar_next[i] = hbar, kbar

    for layer, (m, s2, r, nu2), a in zip(net.layers, mats, acc):
        pre = layer.prefix
        grads[pre + "mean"] = a["mean"]
        grads[pre + "log_scale"] = reduce_to_scale(a["s2"] * 2.0 * s2, layer.granularity)
        if layer.recurrent:
            grads[pre + "rec_mean"] = a["rec"] * layer.mask
            grads[pre + "rec_log_scale"] = reduce_to_scale(a["nu2"] * 2.0 * nu2, layer.granularity)
    return grads


def kl_weight_grads(net: Network, lam: float) -> dict:
    """Gradient of ``lam * sum 0.5 ln(1 + (m/sigma)^2)`` over every posterior weight."""
    from .variational import kl_per_weight_grad

    grads = {}
    p = net.params
    for layer in net.layers:
        pre = layer.prefix
        pairs = [("mean", "log_scale")]
        if isinstance(layer, LifLayer) and layer.recurrent:
            pairs.append(("rec_mean", "rec_log_scale"))
        for mn, sn in pairs:
            m = p[pre + mn]
            sigma = expand_scale(np.exp(p[pre + sn]), m.shape)
            gm, gs = kl_per_weight_grad(m, sigma)
            if mn == "rec_mean":
                gm, gs = gm * layer.mask, gs * layer.mask
            grads[pre + mn] = lam * gm
            grads[pre + sn] = lam * reduce_to_scale(gs, layer.granularity)
    return _mask_frozen(net, grads)


def kl_value(net: Network, trace: Optional[ForwardTrace], mode: KLMode, lam: float) -> float:
    from .variational import elbo_regularizer

    ratios = None if trace is None else trace.neuron_ratios()
    return elbo_regularizer(net.weight_terms(), ratios, mode, lam)
