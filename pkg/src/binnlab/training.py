"""ELBO training loop: cross-entropy, Adam with two parameter groups, cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .core import RngStream
from .datasets import Dataset
from .estimators import EstimatorConfig
from .losses import cross_entropy_per_sample
from .networks import (
    SCALES,
    Network,
    Variant,
    kl_value,
    kl_weight_grads,
    network_backward,
    network_forward,
)
from .variational import KLMode

ATTENUATION_SENTINEL = -1.0

# stream purposes under the run seed
SHUFFLE, NOISE, EVAL = 1, 2, 3


def cross_entropy(logits, targets):
    """Batch-mean softmax cross-entropy and its gradient w.r.t. the logits."""
    losses, grad = cross_entropy_per_sample(logits, targets)
    n = losses.shape[0]
    return float(losses.mean()), grad / n


@dataclass
class OptimizerState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    lr_weights: float = 0.005
    lr_scales: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kw) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
            **kw,
        )

    def __post_init__(self):
        if not (self.lr_weights > 0 and self.lr_scales > 0):
            raise ValueError("learning rates must be positive")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: dict, groups: Optional[dict] = None):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``lr`` maps group name to learning rate; ``groups`` maps parameter name to
    group (every parameter is in group ``"weights"`` if omitted). Parameters
    without a gradient entry are left untouched.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter {p.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        rate = lr[(groups or {}).get(name, "weights")]
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(epoch: int, total_epochs: int, lr0: float, floor_divisor: float = 50.0) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    lr_min = lr0 / floor_divisor
    if total_epochs == 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / (total_epochs - 1)))


def attenuation_factor(per_layer_grad_norms) -> float:
    """Geometric mean of ``||g_l|| / ||g_{l+1}||`` over adjacent layers (shallow first).

    Returns :data:`ATTENUATION_SENTINEL` when fewer than two layers are given
    or any norm is zero or non-finite.
    """
    norms = np.asarray(per_layer_grad_norms, dtype=np.float64)
    if norms.size < 2 or np.any(~np.isfinite(norms)) or np.any(norms <= 0):
        return ATTENUATION_SENTINEL
    return float(np.exp(np.mean(np.log(norms[:-1]) - np.log(norms[1:]))))


def block_gradient_ratio(net: Network, norms) -> float:
    """Shallowest over deepest residual-block gradient norm (all layers if fewer than two blocks)."""
    idx = [i for i, layer in enumerate(net.layers) if getattr(layer, "residual", False)]
    if len(idx) < 2:
        idx = list(range(len(norms)))
    deep = norms[idx[-1]]
    return float(norms[idx[0]] / deep) if deep > 0 else float("nan")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lambda_kl: float = 1e-6
    kl_mode: KLMode = KLMode.PER_WEIGHT
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    variant: Variant = Variant.FPV
    lr_weights: float = 0.005
    lr_scales: float = 0.05
    floor_divisor: float = 50.0
    seed: int = 0
    eval_mode: str = "mean"  # mean | sampled

    def __post_init__(self):
        self.kl_mode = KLMode(self.kl_mode)
        self.variant = Variant(self.variant)
        if isinstance(self.estimator, str):
            self.estimator = EstimatorConfig.parse(self.estimator)
        elif isinstance(self.estimator, dict):
            self.estimator = EstimatorConfig(**self.estimator)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lambda_kl < 0:
            raise ValueError("lambda_kl must be >= 0")
        if self.lr_weights <= 0 or self.lr_scales <= 0:
            raise ValueError("learning rates must be positive")
        if self.floor_divisor < 1:
            raise ValueError("floor_divisor must be >= 1")
        if self.eval_mode not in ("sampled", "mean"):
            raise ValueError("eval_mode must be 'sampled' or 'mean'")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.variant is Variant.NKL else self.lambda_kl


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_accuracy: float
    kl_value: float
    per_layer_grad_norms: list
    attenuation_factor: float
    attenuation_flagged: bool
    lr_weights: float

    def to_dict(self) -> dict:
        return asdict(self)


def objective_gradients(net: Network, x, y, config: TrainConfig, rng: RngStream):
    """Loss, loss-only gradients and full ELBO gradients for one batch."""
    logits, trace = network_forward(net, x, rng)
    loss, dlogits = cross_entropy(logits, y)
    lam = config.effective_lambda
    loss_grads = network_backward(net, trace, dlogits, config.estimator)
    grads = loss_grads
    kl = 0.0
    if lam > 0:
        if config.kl_mode is KLMode.PER_WEIGHT:
            kl_g = kl_weight_grads(net, lam)
        else:
            kl_g = network_backward(net, trace, np.zeros_like(dlogits), config.estimator, lam, KLMode.PER_NEURON)
        grads = {k: v + kl_g.get(k, 0.0) for k, v in loss_grads.items()}
        kl = kl_value(net, trace, config.kl_mode, lam)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc, kl, loss_grads, grads


def layer_grad_norms(net: Network, grads: dict) -> list:
    """Norm of the weight-mean gradient of every stochastic layer, input side first."""
    return [float(np.sqrt(sum(np.sum(grads[n] ** 2) for n in layer.mean_names()))) for layer in net.layers]


def evaluate(net: Network, data: Dataset, mode: str, rng: RngStream) -> float:
    if len(data) == 0:
        return 0.0
    variant = Variant.MFA if mode == "mean" else Variant.FULL
    logits, _ = network_forward(net, data.inputs, rng if variant.sampled else None, variant)
    return float(np.mean(np.argmax(logits, axis=1) == data.targets))


def _check(net: Network, config: TrainConfig):
    if net.spec.variant is not config.variant:
        raise ValueError(f"network variant {net.spec.variant.value} != config variant {config.variant.value}")


def train_epoch(
    net: Network,
    data: Dataset,
    config: TrainConfig,
    opt_state: OptimizerState,
    epoch: int,
    eval_data: Optional[Dataset] = None,
):
    """One pass over shuffled mini-batches; returns ``(net, opt_state, EpochMetrics)``.

    Every random draw comes from a stream keyed by ``(purpose, epoch, batch)``
    under ``config.seed``, so an epoch depends only on the parameters,
    optimiser state and epoch index.
    """
    _check(net, config)
    root = RngStream(config.seed)
    order = root.child(SHUFFLE, epoch).permutation(len(data))
    lr = {
        "weights": cosine_lr(epoch, config.epochs, config.lr_weights, config.floor_divisor),
        SCALES: cosine_lr(epoch, config.epochs, config.lr_scales, config.floor_divisor),
    }
    trainable = {k for k in net.params if net.trainable(k)}
    losses, accs, sizes = [], [], []
    kl = 0.0
    loss_grads = None
    for b, start in enumerate(range(0, len(data), config.batch_size)):
        idx = order[start:start + config.batch_size]
        x, y = data.inputs[idx], data.targets[idx]
        loss, acc, kl, loss_grads, grads = objective_gradients(net, x, y, config, root.child(NOISE, epoch, b))
        adam_step(net.params, {k: v for k, v in grads.items() if k in trainable}, opt_state, lr, net.groups)
        losses.append(loss)
        accs.append(acc)
        sizes.append(len(idx))
    norms = layer_grad_norms(net, loss_grads)
    att = attenuation_factor(norms)
    evald = data if eval_data is None else eval_data
    eval_acc = evaluate(net, evald, config.eval_mode, root.child(EVAL, epoch))
    w = np.asarray(sizes, dtype=np.float64)
    metrics = EpochMetrics(
        epoch=epoch,
        train_loss=float(np.dot(losses, w) / w.sum()),
        train_accuracy=float(np.dot(accs, w) / w.sum()),
        eval_accuracy=eval_acc,
        kl_value=float(kl),
        per_layer_grad_norms=norms,
        attenuation_factor=att,
        attenuation_flagged=att == ATTENUATION_SENTINEL,
        lr_weights=lr["weights"],
    )
    return net, opt_state, metrics


def new_optimizer(net: Network, config: TrainConfig) -> OptimizerState:
    return OptimizerState.zeros_like(net.params, lr_weights=config.lr_weights, lr_scales=config.lr_scales)


def train(
    net: Network,
    data: Dataset,
    config: TrainConfig,
    opt_state: Optional[OptimizerState] = None,
    start_epoch: int = 0,
    stop_epoch: Optional[int] = None,
    eval_data: Optional[Dataset] = None,
    callback=None,
) -> list:
    """Run epochs ``[start_epoch, stop_epoch)``; ``callback(net, opt_state, metrics)`` after each."""
    opt_state = opt_state or new_optimizer(net, config)
    history = []
    for epoch in range(start_epoch, config.epochs if stop_epoch is None else stop_epoch):
        net, opt_state, m = train_epoch(net, data, config, opt_state, epoch, eval_data)
        history.append(m)
        if callback is not None:
            callback(net, opt_state, m)
    return history
