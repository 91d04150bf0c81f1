"""Self-contained experiments backing the estimator and spiking-layer claims.

* :func:`policy_instance` / :func:`policy_check` build a small two-layer network
  in the regime where IW-ST policies separate (saturated first-layer units,
  downstream preactivations close to zero with every single toggle moving
  them further out) and compare bias and variance of the policies against the
  exact oracle.
* :func:`recursion_rates` / :func:`explicit_resampling_rates` estimate
  per-(neuron, step) firing probabilities of one LIF layer two ways: via the
  ``(h*, kappa^2)`` recursion, and by literally resampling every past weight
  at every step and summing the expanded membrane potential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .estimators import EstimatorConfig
from .losses import LinearLoss
from .networks import LifState, Network, Variant, lif_step, mlp_spec
from .oracles import CHUNK, exact_gradient_ram, estimator_moments
from .variational import Granularity

POLICIES = ("ST", "IWST:P0", "IWST:P1", "IWST:HALF", "IWST:LOW_VAR")


# ---------------------------------------------------------------------------
# IW-ST policy bias / variance


def policy_instance(seed: int, n_in: int = 3, n_hidden: int = 5, n_out: int = 3):
    """Two stochastic layers, one input, linear loss.

    First-layer units have ``|z|`` in ``[0.8, 1.5]`` (``F`` outside
    ``[0.21, 0.79]``); the last first-layer unit is effectively always on and
    carries almost all of the second layer's noise, so second-layer ``kappa``
    is nearly configuration independent. Second-layer ``|z|`` sits in
    ``[0.7, 0.78]`` at the most likely first-layer configuration and every
    single toggle of a first-layer unit moves it further from zero while
    staying below one.

    Returns ``(net, x, target)``.
    """
    rng = np.random.default_rng(seed)
    spec = mlp_spec(n_in, [n_hidden, n_out], 1, variant=Variant.FULL, granularity=Granularity.PER_WEIGHT)
    net = Network(spec, seed=seed)
    p = net.params
    x = np.ones(n_in)

    p["0.log_scale"][...] = np.log(1.0 / np.sqrt(n_in))  # first-layer kappa = 1
    z1 = rng.uniform(0.8, 1.5, n_hidden) * rng.choice([-1.0, 1.0], n_hidden)
    z1[-1] = 8.0
    m1 = rng.normal(size=(n_hidden, n_in))
    m1 += (z1 - m1.sum(axis=1))[:, None] / n_in
    p["0.mean"][...] = m1
    likely = z1 > 0

    log_s2 = np.full((n_out, n_hidden), np.log(0.05))
    log_s2[:, -1] = 0.0
    p["1.log_scale"][...] = log_s2
    sign = rng.choice([-1.0, 1.0], n_out)
    z2 = sign * rng.uniform(0.7, 0.78, n_out)
    step = rng.uniform(0.05, 0.2, (n_out, n_hidden - 1))
    # dropping a likely-on input or adding a likely-off one pushes z away from 0
    m2 = np.where(likely[None, :-1], -sign[:, None] * step, sign[:, None] * step)
    on_sum = (m2 * likely[None, :-1]).sum(axis=1)
    p["1.mean"][...] = np.concatenate([m2, (z2 - on_sum)[:, None]], axis=1)
    p["2.mean"][...] = rng.normal(size=(1, n_out))
    return net, x, LinearLoss(np.array([1.0]))


@dataclass
class PolicyReport:
    median_abs_bias: dict  # policy -> median |bias| over first-layer weight means
    median_variance: dict  # policy -> median variance over all weight means
    median_se: dict
    trials: int

    @property
    def euler_bias_worse(self) -> bool:
        b = self.median_abs_bias
        return min(b["IWST:P0"], b["IWST:P1"]) > max(b["ST"], b["IWST:HALF"])

    @property
    def low_var_not_worse(self) -> bool:
        return self.median_variance["IWST:LOW_VAR"] <= self.median_variance["IWST:HALF"]

    @property
    def passed(self) -> bool:
        return self.euler_bias_worse and self.low_var_not_worse


def policy_check(seed: int, trials: int, rng: RngStream, policies=POLICIES) -> PolicyReport:
    net, x, target = policy_instance(seed)
    oracle = exact_gradient_ram(net, x, target)
    bias, var, se = {}, {}, {}
    for i, label in enumerate(policies):
        m = estimator_moments(net, x, target, EstimatorConfig.parse(label), trials, rng.child(i), oracle)
        bias[label] = float(np.median(np.abs(m.bias["0.mean"])))
        var[label] = float(np.median(np.concatenate([m.variance[k].ravel() for k in ("0.mean", "1.mean")])))
        se[label] = float(np.median(m.standard_error["0.mean"]))
    return PolicyReport(bias, var, se, trials)


# ---------------------------------------------------------------------------
# recursion vs explicit resampling for one LIF layer


def _check_lif(net: Network, index: int, inputs):
    layer = net.layers[index]
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ValueError(f"inputs must be (T, {layer.n_in})")
    return layer, x


def recursion_rates(net: Network, index: int, inputs, trials: int, rng: RngStream) -> tuple:
    """Firing rates ``(T, n)`` and their SEs from sampled ``lif_step`` calls."""
    layer, x = _check_lif(net, index, inputs)
    counts = np.zeros((x.shape[0], layer.n_out))
    for c, start in enumerate(range(0, trials, CHUNK)):
        size = min(CHUNK, trials - start)
        state = LifState.zeros(size, layer.n_out)
        stream = rng.child(c)
        for t in range(x.shape[0]):
            o, state, _ = lif_step(net, index, state, np.broadcast_to(x[t], (size, layer.n_in)), Variant.FULL, stream)
            counts[t] += o.sum(axis=0)
    return _rates(counts, trials)


def explicit_resampling_rates(net: Network, index: int, inputs, trials: int, rng: RngStream) -> tuple:
    """Firing rates from the expanded membrane sum with fresh weights for every (t, s).

    ``h_t = sum_s beta^s (W^(t,s) x_{t-s} + R^(t,s) o_{t-s-1} - theta o_{t-s-1})``
    plus, per step, independent base noise of variance ``base_noise``. Every
    ``W^(t,s)`` and ``R^(t,s)`` is an independent draw from the weight posterior.
    """
    layer, x = _check_lif(net, index, inputs)
    m, s2, r, nu2 = layer.matrices(net.params)
    sd, rsd = np.sqrt(s2), None if r is None else np.sqrt(nu2)
    T, n = x.shape[0], layer.n_out
    counts = np.zeros((T, n))
    for c, start in enumerate(range(0, trials, CHUNK)):
        size = min(CHUNK, trials - start)
        stream = rng.child(c)
        outs = []  # outs[t]: (size, n)
        for t in range(T):
            h = np.zeros((size, n))
            for s in range(t + 1):
                w = m + sd * stream.normal((size,) + m.shape)
                h += layer.beta**s * np.einsum("boi,i->bo", w, x[t - s])
                if t - s - 1 >= 0:
                    prev = outs[t - s - 1]
                    if r is not None:
                        rw = (r + rsd * stream.normal((size,) + r.shape)) * layer.mask
                        h += layer.beta**s * np.einsum("bok,bk->bo", rw, prev)
                    h -= layer.beta**s * layer.theta * prev
            if layer.base_noise > 0:
                h += np.sqrt(layer.base_noise) * stream.normal((size, n))
            o = (h > layer.theta).astype(np.float64)
            outs.append(o)
            counts[t] += o.sum(axis=0)
    return _rates(counts, trials)


def _rates(counts, trials):
    rates = counts / trials
    return rates, np.sqrt(np.maximum(rates * (1.0 - rates), 1.0 / trials) / trials)


@dataclass
class RecurrenceReport:
    recursion: np.ndarray
    explicit: np.ndarray
    z_scores: np.ndarray
    trials: int

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.z_scores) <= 3.0))


def recurrence_equivalence_check(net: Network, index: int, inputs, trials: int, rng: RngStream) -> RecurrenceReport:
    rec, rec_se = recursion_rates(net, index, inputs, trials, rng.child(0))
    exp, exp_se = explicit_resampling_rates(net, index, inputs, trials, rng.child(1))
    z = (rec - exp) / np.sqrt(rec_se**2 + exp_se**2)
    return RecurrenceReport(rec, exp, z, trials)

