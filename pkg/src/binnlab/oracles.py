"""Ground-truth gradients for tiny feedforward binary networks and Monte Carlo checks.

Every oracle here addresses the *expected* loss over the Bernoulli unit
outputs, ``E_o[L(o)]``, for a single network input. Exact quantities come from
enumerating unit configurations layer by layer (the network is Markov in its
layers, so a distribution vector over one layer's configurations is enough).
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import RngStream, clip_probability, std_normal_cdf, std_normal_pdf
from .estimators import EstimatorConfig, EstimatorKind, agr_surrogate_factor, gs_st_surrogate_factor
from .losses import sample_loss
from .networks import Network, network_backward, network_forward

PRUNE = 1e-300
CHUNK = 10_000


class BudgetExceeded(ValueError):
    """The network has too many stochastic units to enumerate."""


@dataclass(frozen=True)
class EnumerationBudget:
    max_stochastic_units: int = 20

    def __post_init__(self):
        if self.max_stochastic_units < 1:
            raise ValueError("max_stochastic_units must be positive")


@dataclass
class EstimatorMoments:
    mean_gradient: dict
    variance: dict
    bias: Optional[dict]
    standard_error: dict
    trials: int

    def flat(self, field: str) -> np.ndarray:
        d = getattr(self, field)
        return np.concatenate([np.ravel(d[k]) for k in sorted(d)])


@dataclass
class BiasBoundReport:
    epsilon: float
    empirical_probability: float
    chebyshev_lower_bound: float
    standard_error: float
    trials: int

    @property
    def holds(self) -> bool:
        return self.empirical_probability >= self.chebyshev_lower_bound - 4.0 * self.standard_error


@dataclass
class RaoBlackwellReport:
    F: float
    k: float
    mc_mean: tuple  # (o=0, o=1)
    mc_se: tuple
    closed_form: tuple
    var_gs_st: float
    var_agr: float
    trials: int

    @property
    def means_agree(self) -> bool:
        return all(abs(m - c) <= 3.0 * s for m, c, s in zip(self.mc_mean, self.closed_form, self.mc_se))

    @property
    def variance_reduced(self) -> bool:
        return self.var_agr <= self.var_gs_st

    @property
    def passed(self) -> bool:
        return self.means_agree and self.variance_reduced


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BINNLAB_THREADS", "1")))
    except ValueError:
        return 1


def _check_budget(net: Network, budget: EnumerationBudget):
    if net.spec.spiking:
        raise ValueError("enumeration oracles cover feedforward networks only")
    n = net.n_stochastic_units
    if n > budget.max_stochastic_units:
        raise BudgetExceeded(
            f"network has {n} stochastic units, budget allows {budget.max_stochastic_units}; use a smaller net"
        )


def _configs(shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape((2**n,) + tuple(shape))


def _single_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.spec.input_shape:
        x = x[None]
    if x.shape != (1,) + net.spec.input_shape:
        raise ValueError(f"oracles take one input of shape {net.spec.input_shape}, got {x.shape}")
    return x


def _layer_passes(net: Network, x):
    """Forward sweep: per layer, the live parent configurations with their
    probabilities, the unit statistics under each parent and the transition matrix."""
    p = net.params
    parents, probs = x, np.ones(1)
    out = []
    for layer in net.layers:
        live = probs > PRUNE
        parents, probs = parents[live], probs[live]
        h, k2, aux = layer.stats(p, parents)
        kappa = np.sqrt(k2)
        z = (h - layer.theta) / kappa
        F = std_normal_cdf(z).reshape(len(parents), -1)
        children = _configs(layer.out_shape)
        b = children.reshape(len(children), -1)
        # P(b | a) = prod_i F_i^b_i (1 - F_i)^(1 - b_i)
        with np.errstate(divide="ignore"):
            logs = np.log(np.where(b[None] == 1, F[:, None, :], 1.0 - F[:, None, :]))
        trans = np.exp(logs.sum(axis=2))
        out.append(dict(parents=parents, probs=probs, live=live, z=z, kappa=kappa, aux=aux, F=F, trans=trans))
        parents, probs = children, probs @ trans
    return out, parents, probs


def enumerate_expected_loss(net: Network, x, target, budget: EnumerationBudget = EnumerationBudget()) -> float:
    """Exact ``E[L]`` by summing over every configuration of the stochastic units."""
    _check_budget(net, budget)
    _, finals, probs = _layer_passes(net, _single_input(net, x))
    losses, _ = sample_loss(target, net.readout.forward(net.params, finals))
    return float(probs @ losses)


def exact_gradient_fd(
    net: Network, x, target, budget: EnumerationBudget = EnumerationBudget(), step: float = 1e-4
) -> dict:
    """Central finite differences of :func:`enumerate_expected_loss`, ``delta = step * max(1, |p|)``."""
    if not step > 0:
        raise ValueError("step must be positive")
    _check_budget(net, budget)
    work = net.copy()
    grads = {}
    for name, value in net.params.items():
        g = np.zeros_like(value)
        flat = work.params[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            d = step * max(1.0, abs(orig))
            flat[i] = orig + d
            up = enumerate_expected_loss(work, x, target, budget)
            flat[i] = orig - d
            down = enumerate_expected_loss(work, x, target, budget)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * d)
        grads[name] = g
    return grads


def exact_gradient_ram(net: Network, x, target, budget: EnumerationBudget = EnumerationBudget()) -> dict:
    """Exact gradient by per-unit marginalisation.

    For every unit and parent configuration ``a`` the learning signal is
    ``E[L | a, o_i=1] - E[L | a, o_i=0]``, computed by enumeration; the
    gradient is ``sum_a P(a) * signal * dF_i/dparam``.
    """
    _check_budget(net, budget)
    p = net.params
    passes, finals, probs = _layer_passes(net, _single_input(net, x))
    losses, dlogits = sample_loss(target, net.readout.forward(p, finals))
    grads, _ = net.readout.backward(p, finals, probs[:, None] * dlogits)
    values = losses  # V_L(b) = E[L | o_L = b]
    for layer, ps in reversed(list(zip(net.layers, passes))):
        F, trans = ps["F"], ps["trans"]
        n = F.shape[1]
        vt = values.reshape((2,) * n)
        signal = np.empty_like(F)
        for i in range(n):
            diff = (np.take(vt, 1, axis=i) - np.take(vt, 0, axis=i)).reshape(-1)
            others = [j for j in range(n) if j != i]
            sub = _configs((n - 1,)).reshape(2 ** (n - 1), n - 1) if n > 1 else np.zeros((1, 0))
            Fo = F[:, others]
            with np.errstate(divide="ignore"):
                logs = np.log(np.where(sub[None] == 1, Fo[:, None, :], 1.0 - Fo[:, None, :]))
            signal[:, i] = np.exp(logs.sum(axis=2)) @ diff
        z, kappa = ps["z"], ps["kappa"]
        c = (ps["probs"][:, None] * signal).reshape(z.shape)
        phi = std_normal_pdf(z)
        dh = c * phi / kappa
        dk2 = c * phi * (-z / kappa) / (2.0 * kappa)
        grads.update(layer.param_grads(p, ps["parents"], dh, dk2, ps["aux"]))
        # pruned parent configurations keep a zero value (their probability is < PRUNE)
        values = np.zeros(ps["live"].size)
        values[ps["live"]] = trans @ vt.reshape(-1)
    return grads


def _chunks(trials: int):
    sizes = [CHUNK] * (trials // CHUNK)
    if trials % CHUNK:
        sizes.append(trials % CHUNK)
    return sizes


def _accumulate(run_chunk: Callable[[int, int], dict], trials: int) -> tuple[dict, dict]:
    """Run chunked trials (optionally threaded) and merge means and M2 sums exactly."""
    sizes = _chunks(trials)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda a: run_chunk(*a), enumerate(sizes)))
    mean, m2, count = None, None, 0
    for size, per_sample in zip(sizes, results):
        cm = {k: v.mean(axis=0) for k, v in per_sample.items()}
        cs = {k: ((v - cm[k]) ** 2).sum(axis=0) for k, v in per_sample.items()}
        if mean is None:
            mean, m2, count = cm, cs, size
            continue
        tot = count + size
        for k in mean:
            delta = cm[k] - mean[k]
            mean[k] = mean[k] + delta * (size / tot)
            m2[k] = m2[k] + cs[k] + delta**2 * (count * size / tot)
        count = tot
    var = {k: v / (trials - 1) for k, v in m2.items()}
    return mean, var


def _moments(mean, var, trials, oracle) -> EstimatorMoments:
    se = {k: np.sqrt(v / trials) for k, v in var.items()}
    bias = None if oracle is None else {k: mean[k] - oracle[k] for k in mean}
    return EstimatorMoments(mean, var, bias, se, trials)


def _tile(net: Network, x, n: int) -> np.ndarray:
    return np.repeat(_single_input(net, x), n, axis=0)


def estimator_moments(
    net: Network,
    x,
    target,
    estimator: EstimatorConfig,
    trials: int,
    rng: RngStream,
    oracle: Optional[dict] = None,
) -> EstimatorMoments:
    """Mean, variance and SE of a local-rule estimator over independent forward/backward passes.

    ``bias`` is reported against ``oracle`` when given (typically
    :func:`exact_gradient_fd`). Trials run as a batch, chunked with one child
    stream per chunk, so results do not depend on the thread count.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    if estimator.kind is EstimatorKind.REINFORCE:
        return reinforce_gradient(net, x, target, trials, rng, oracle)

    def run(i, size):
        logits, trace = network_forward(net, _tile(net, x, size), rng.child(i))
        _, dlogits = sample_loss(target, logits)
        return network_backward(net, trace, dlogits, estimator, per_sample=True, mask_frozen=False)

    mean, var = _accumulate(run, trials)
    return _moments(mean, var, trials, oracle)


def reinforce_gradient(net: Network, x, target, trials: int, rng: RngStream, oracle: Optional[dict] = None):
    """Score-function estimator ``L * sum_units d log p(o_unit)/d param`` (readout is pathwise)."""
    if trials < 2:
        raise ValueError("need at least two trials")
    p = net.params

    def run(i, size):
        logits, trace = network_forward(net, _tile(net, x, size), rng.child(i))
        losses, dlogits = sample_loss(target, logits)
        grads, _ = net.readout.backward(p, trace.readout_input, dlogits, per_sample=True)
        for layer, tr in zip(net.layers, trace.layers):
            F = clip_probability(std_normal_cdf(tr.z))
            lw = losses.reshape((-1,) + (1,) * (tr.z.ndim - 1))
            c = lw * np.where(tr.output == 1, 1.0 / F, -1.0 / (1.0 - F))
            phi = std_normal_pdf(tr.z)
            dh = c * phi / tr.kappa
            dk2 = c * phi * (-tr.z / tr.kappa) / (2.0 * tr.kappa)
            grads.update(layer.param_grads(p, tr.x, dh, dk2, tr.aux, per_sample=True))
        return grads

    mean, var = _accumulate(run, trials)
    return _moments(mean, var, trials, oracle)


def rao_blackwell_check(
    F: float,
    k: float,
    trials: int,
    rng: RngStream,
    closed_form: Callable = agr_surrogate_factor,
) -> RaoBlackwellReport:
    """Compare Monte Carlo conditional means of the GS-ST factor with the AGR closed form.

    ``closed_form(o, F, k)`` is injectable so a broken formula can be used as a
    negative control. The variance comparison uses a unit downstream coefficient.
    """
    if not 0.0 < F < 1.0:
        raise ValueError("F must lie strictly inside (0, 1)")
    if not k > 0:
        raise ValueError("k must be positive")
    u = rng.uniform(trials)
    o = (u > 1.0 - F).astype(np.float64)
    s = gs_st_surrogate_factor(u, F, k)
    means, ses, forms = [], [], []
    for val in (0.0, 1.0):
        sel = s[o == val]
        means.append(float(sel.mean()))
        ses.append(float(sel.std(ddof=1) / np.sqrt(sel.size)))
        forms.append(float(closed_form(val, F, k)))
    agr = np.where(o == 1, forms[1], forms[0])
    return RaoBlackwellReport(
        F, k, tuple(means), tuple(ses), tuple(forms), float(s.var(ddof=1)), float(agr.var(ddof=1)), trials
    )


def preactivation_ratios(net: Network, x, trials: int, rng: RngStream) -> np.ndarray:
    """Samples of ``(h* - theta)/kappa`` for every unit, shape ``(trials, units)``."""
    logits, trace = network_forward(net, _tile(net, x, trials), rng)
    return np.concatenate([r for r in trace.neuron_ratios()], axis=1)


def chebyshev_bound_check(net: Network, x, epsilon: float, trials: int, rng: RngStream) -> BiasBoundReport:
    """Empirical joint concentration of the unit ratios vs ``1 - sum Var / epsilon^2``.

    Means and variances are estimated from an independent set of draws so the
    probability estimate is not conditioned on its own sample moments.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if trials < 2:
        raise ValueError("need at least two trials")
    ref = preactivation_ratios(net, x, trials, rng.child(0))
    sample = preactivation_ratios(net, x, trials, rng.child(1))
    mu, var = ref.mean(axis=0), ref.var(axis=0, ddof=1)
    inside = np.all(np.abs(sample - mu) < epsilon, axis=1)
    prob = float(inside.mean())
    bound = 1.0 - float(var.sum()) / epsilon**2
    se = float(np.sqrt(max(prob * (1.0 - prob), 1.0 / trials) / trials))
    return BiasBoundReport(float(epsilon), prob, bound, se, trials)
