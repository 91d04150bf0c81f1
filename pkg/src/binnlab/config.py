"""Run configuration: a versioned YAML document with a strict, documented schema.

Every section is a dataclass; unknown keys, wrong types and invalid values
are rejected with a :class:`ConfigError` naming the dotted field. Dotted
``key=value`` overrides (values parsed as YAML scalars) are applied before
validation.

Schema (defaults in parentheses)::

    config_version: 1            # required
    seed: (0)
    data:
      kind: parity | temporal | csv | jsonl   (parity)
      n_bits: (4)                 # parity
      n_samples: (0)              # parity: 0 = full truth table; temporal: sample count
      n_classes: (null)           # class count; temporal default 3, csv / jsonl inferred
      timesteps: (20)             # temporal
      channels: (20)              # temporal
      noise_rate: (0.1)           # temporal
      path: (null)                # csv / jsonl
      test_fraction: (0.0)        # held-out fraction used for eval accuracy
    network:
      arch: residual_mlp | mlp | spiking   (residual_mlp)
      width: (128)                # residual_mlp
      blocks: (12)                # residual_mlp
      widths: ([32, 32])          # mlp / spiking hidden widths
      block_init_gain: (null)     # residual_mlp
      recurrent: (true)           # spiking
      fpv_sigma, theta (null: 1 for spiking, 0 otherwise), beta (0.9),
      readout_beta (0.9), granularity (PER_LAYER), base_noise (0.0),
      init_gain (1.0), sigma0_coef (0.5)
    train:
      epochs (50), batch_size (16), lambda_kl (1e-6), kl_mode (PER_WEIGHT),
      estimator ("ST"), variant (FPV), lr_weights (0.005), lr_scales (0.05),
      floor_divisor (50), eval_mode (mean)
    bench:
      n_inputs (3), widths ([3, 3]), n_classes (2), variant (FULL),
      theta (0.2; a nonzero threshold keeps an all-silent layer away from
      the zero-noise singularity of the next one),
      estimators ([ST, "IWST:ST_MATCH", "IWST:HALF", "AGR:1.0", REINFORCE]),
      trials (20000), oracle: ram | fd (ram)
    theorem_checks:
      rb_pairs (50), rb_trials (1000000), cheb_networks (100),
      cheb_epsilons ([0.5, 1.0, 2.0]), cheb_trials (4000), policy_seed (0),
      policy_trials (100000), recurrence_trials (100000)
    grad_probe:
      lambdas ([0.0, 1e-7, 1e-6, 1e-5]), variants ([FPV]), epochs (30),
      seeds ([0])
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .datasets import Dataset, gen_parity, gen_temporal_pattern, load_csv_dataset, load_spike_jsonl, parity_truth_table
from .estimators import EstimatorConfig
from .networks import NetworkSpec, Variant, mlp_spec, residual_mlp_spec, spiking_spec
from .training import TrainConfig
from .variational import KLMode

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    kind: str = "parity"
    n_bits: int = 4
    n_samples: int = 0
    n_classes: Optional[int] = None
    timesteps: int = 20
    channels: int = 20
    noise_rate: float = 0.1
    path: Optional[str] = None
    test_fraction: float = 0.0


@dataclass
class NetworkConfig:
    arch: str = "residual_mlp"
    width: int = 128
    blocks: int = 12
    widths: list[int] = field(default_factory=lambda: [32, 32])
    block_init_gain: Optional[float] = None
    recurrent: bool = True
    fpv_sigma: Optional[float] = None
    theta: Optional[float] = None
    beta: float = 0.9
    readout_beta: float = 0.9
    granularity: str = "PER_LAYER"
    base_noise: float = 0.0
    init_gain: float = 1.0
    sigma0_coef: float = 0.5


@dataclass
class TrainSection:
    epochs: int = 50
    batch_size: int = 16
    lambda_kl: float = 1e-6
    kl_mode: str = "PER_WEIGHT"
    estimator: str = "ST"
    variant: str = "FPV"
    lr_weights: float = 0.005
    lr_scales: float = 0.05
    floor_divisor: float = 50.0
    eval_mode: str = "mean"


@dataclass
class BenchConfig:
    n_inputs: int = 3
    widths: list[int] = field(default_factory=lambda: [3, 3])
    n_classes: int = 2
    variant: str = "FULL"
    theta: float = 0.2
    estimators: list[str] = field(default_factory=lambda: ["ST", "IWST:ST_MATCH", "IWST:HALF", "AGR:1.0", "REINFORCE"])
    trials: int = 20000
    oracle: str = "ram"


@dataclass
class TheoremConfig:
    rb_pairs: int = 50
    rb_trials: int = 1_000_000
    cheb_networks: int = 100
    cheb_epsilons: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    cheb_trials: int = 4000
    policy_seed: int = 0
    policy_trials: int = 100_000
    recurrence_trials: int = 100_000


@dataclass
class ProbeConfig:
    lambdas: list[float] = field(default_factory=lambda: [0.0, 1e-7, 1e-6, 1e-5])
    variants: list[str] = field(default_factory=lambda: ["FPV"])
    epochs: int = 30
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    config_version: int
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    bench: BenchConfig = field(default_factory=BenchConfig)
    theorem_checks: TheoremConfig = field(default_factory=TheoremConfig)
    grad_probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            lambda_kl=t.lambda_kl,
            kl_mode=t.kl_mode,
            estimator=t.estimator,
            variant=t.variant,
            lr_weights=t.lr_weights,
            lr_scales=t.lr_scales,
            floor_divisor=t.floor_divisor,
            seed=self.seed,
            eval_mode=t.eval_mode,
        )

    def network_spec(self, n_inputs: int, n_classes: int, timesteps: int = 1) -> NetworkSpec:
        n = self.network
        kw = dict(
            variant=self.train.variant,
            fpv_sigma=n.fpv_sigma,
            beta=n.beta,
            readout_beta=n.readout_beta,
            granularity=n.granularity,
            base_noise=n.base_noise,
            init_gain=n.init_gain,
            sigma0_coef=n.sigma0_coef,
        )
        if n.theta is not None:
            kw["theta"] = n.theta
        if n.arch == "residual_mlp":
            return residual_mlp_spec(n_inputs, n.width, n.blocks, n_classes, block_init_gain=n.block_init_gain, **kw)
        if n.arch == "mlp":
            return mlp_spec(n_inputs, list(n.widths), n_classes, **kw)
        return spiking_spec(n_inputs, list(n.widths), n_classes, recurrent=n.recurrent, timesteps=timesteps, **kw)

    def dataset(self) -> tuple[Dataset, Optional[Dataset]]:
        """``(train, eval)``; ``eval`` is ``None`` when no fraction is held out."""
        d = self.data
        if d.kind == "parity":
            ds = parity_truth_table(d.n_bits) if d.n_samples == 0 else gen_parity(d.n_bits, d.n_samples, self.seed)
        elif d.kind == "temporal":
            n = d.n_samples or 300
            ds = gen_temporal_pattern(d.n_classes or 3, d.timesteps, d.channels, d.noise_rate, self.seed, n_samples=n)
        elif d.kind == "csv":
            ds = load_csv_dataset(d.path, {"classes": d.n_classes} if d.n_classes else None)
        else:
            ds = load_spike_jsonl(d.path, d.n_classes)
        if d.test_fraction > 0:
            return ds.split(d.test_fraction, self.seed)
        return ds, None


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-5) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {_type_name(tp)}")  # pragma: no cover


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {raw!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown field {prefix}{unknown[0]}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{where}.{f.name}" if where else f.name
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], path)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required field {path}")
    return cls(**kwargs)


def _positive(where: str, value, allow_zero: bool = False):
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{where}: must be {'>= 0' if allow_zero else 'positive'}, got {value}")


def _choice(where: str, value, options):
    if value not in options:
        raise ConfigError(f"{where}: must be one of {list(options)}, got {value!r}")


def validate(cfg: RunConfig) -> RunConfig:
    """Semantic checks beyond types; every error names its field."""
    if cfg.config_version != CONFIG_VERSION:
        raise ConfigError(f"config_version: unsupported version {cfg.config_version} (expected {CONFIG_VERSION})")
    d, n = cfg.data, cfg.network
    _choice("data.kind", d.kind, ("parity", "temporal", "csv", "jsonl"))
    if d.kind in ("csv", "jsonl") and not d.path:
        raise ConfigError(f"data.path: required for data.kind={d.kind}")
    if not 1 <= d.n_bits <= 16:
        raise ConfigError(f"data.n_bits: must lie in [1, 16], got {d.n_bits}")
    _positive("data.n_samples", d.n_samples, allow_zero=True)
    if not 1 <= d.timesteps <= 100:
        raise ConfigError(f"data.timesteps: must lie in [1, 100], got {d.timesteps}")
    _positive("data.channels", d.channels)
    if d.n_classes is not None:
        _positive("data.n_classes", d.n_classes)
    if not 0.0 <= d.noise_rate <= 1.0:
        raise ConfigError(f"data.noise_rate: must lie in [0, 1], got {d.noise_rate}")
    if not 0.0 <= d.test_fraction < 1.0:
        raise ConfigError(f"data.test_fraction: must lie in [0, 1), got {d.test_fraction}")

    _choice("network.arch", n.arch, ("residual_mlp", "mlp", "spiking"))
    spiking_data = d.kind in ("temporal", "jsonl")
    if spiking_data != (n.arch == "spiking"):
        raise ConfigError(f"network.arch: {n.arch} does not fit data.kind={d.kind}")
    _positive("network.width", n.width)
    _positive("network.blocks", n.blocks, allow_zero=True)
    if not n.widths:
        raise ConfigError("network.widths: needs at least one hidden layer")
    for i, w in enumerate(n.widths):
        _positive(f"network.widths[{i}]", w)

    t = cfg.train
    for name, enum_cls in (("variant", Variant), ("kl_mode", KLMode)):
        try:
            enum_cls(getattr(t, name))
        except ValueError:
            options = [e.value for e in enum_cls]
            raise ConfigError(f"train.{name}: must be one of {options}, got {getattr(t, name)!r}") from None
    try:
        EstimatorConfig.parse(t.estimator)
    except ValueError as exc:
        raise ConfigError(f"train.estimator: {exc}") from None
    _choice("train.eval_mode", t.eval_mode, ("mean", "sampled"))
    for name in ("epochs", "batch_size", "lr_weights", "lr_scales"):
        _positive(f"train.{name}", getattr(t, name))
    _positive("train.lambda_kl", t.lambda_kl, allow_zero=True)
    if t.floor_divisor < 1:
        raise ConfigError(f"train.floor_divisor: must be >= 1, got {t.floor_divisor}")
    try:
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from None
    try:
        cfg.network_spec(2, 2, d.timesteps if spiking_data else 1)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"network: {exc}") from None

    b = cfg.bench
    _positive("bench.n_inputs", b.n_inputs)
    _positive("bench.n_classes", b.n_classes)
    if b.n_classes < 2:
        raise ConfigError("bench.n_classes: must be >= 2")
    for i, w in enumerate(b.widths):
        _positive(f"bench.widths[{i}]", w)
    try:
        Variant(b.variant)
    except ValueError:
        raise ConfigError(f"bench.variant: unknown variant {b.variant!r}") from None
    for i, e in enumerate(b.estimators):
        try:
            EstimatorConfig.parse(e)
        except ValueError as exc:
            raise ConfigError(f"bench.estimators[{i}]: {exc}") from None
    if b.trials < 2:
        raise ConfigError("bench.trials: must be >= 2")
    _choice("bench.oracle", b.oracle, ("ram", "fd"))

    th = cfg.theorem_checks
    for name in ("rb_pairs", "cheb_networks"):
        _positive(f"theorem_checks.{name}", getattr(th, name), allow_zero=True)
    for name in ("rb_trials", "cheb_trials", "policy_trials", "recurrence_trials"):
        if getattr(th, name) < 2:
            raise ConfigError(f"theorem_checks.{name}: must be >= 2")
    for i, e in enumerate(th.cheb_epsilons):
        _positive(f"theorem_checks.cheb_epsilons[{i}]", e)

    g = cfg.grad_probe
    for i, lam in enumerate(g.lambdas):
        _positive(f"grad_probe.lambdas[{i}]", lam, allow_zero=True)
    for i, v in enumerate(g.variants):
        try:
            Variant(v)
        except ValueError:
            raise ConfigError(f"grad_probe.variants[{i}]: unknown variant {v!r}") from None
    _positive("grad_probe.epochs", g.epochs)
    if not g.seeds:
        raise ConfigError("grad_probe.seeds: needs at least one seed")
    return cfg


def _set_dotted(doc: dict, key: str, value):
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"--set: malformed key {key!r}")
    node = doc
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set: {part} in {key!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set: expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {key}: cannot parse value ({exc})") from None
    return key.strip(), value


def from_dict(doc: dict, overrides: Optional[list] = None) -> RunConfig:
    doc = copy.deepcopy(doc) if doc is not None else {}
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    for item in overrides or []:
        key, value = item if isinstance(item, tuple) else parse_override(item)
        _set_dotted(doc, key, value)
    return validate(_build(RunConfig, doc, ""))


def load_config(path, overrides: Optional[list] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: no such file {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: {path} is not valid YAML ({exc})") from None
    return from_dict(doc, overrides)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
