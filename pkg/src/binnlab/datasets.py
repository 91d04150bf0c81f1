"""Synthetic parity / temporal-pattern tasks and CSV / JSONL ingestion.

CSV files have a header row with feature columns and a ``label`` column.
Spike datasets are JSONL, one object per line: ``{"spikes": [[0, 1, ...], ...],
"label": 2}`` where ``spikes`` is a dense ``T x channels`` 0/1 grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import RngStream


class DatasetError(ValueError):
    """Malformed dataset input."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.int64)
        if x.shape[0] != y.shape[0]:
            raise DatasetError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if np.any((x != 0) & (x != 1)):
            raise DatasetError("inputs must be binary")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DatasetError(f"targets must lie in [0, {self.n_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.targets[index], self.n_classes, dict(self.meta))

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Disjoint, exhaustive random split into ``(train, test)``."""
        if not 0.0 <= test_fraction <= 1.0:
            raise ValueError("test_fraction must lie in [0, 1]")
        order = RngStream(seed, (7,)).permutation(len(self))
        n_test = int(round(test_fraction * len(self)))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


@dataclass(frozen=True)
class SpikePattern:
    templates: np.ndarray  # (n_classes, T, channels) firing rates
    noise_rate: float

    def __post_init__(self):
        t = np.asarray(self.templates, dtype=np.float64)
        if t.ndim != 3 or np.any(t < 0) or np.any(t > 1):
            raise ValueError("templates must be (classes, T, channels) rates in [0, 1]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        object.__setattr__(self, "templates", t)


def parity_truth_table(n_bits: int) -> Dataset:
    """All ``2^n_bits`` inputs with their XOR labels, in binary counting order."""
    if not 1 <= n_bits <= 16:
        raise ValueError("n_bits must lie in [1, 16]")
    codes = np.arange(2**n_bits)
    x = (codes[:, None] >> np.arange(n_bits - 1, -1, -1)) & 1
    return Dataset(x, x.sum(axis=1) % 2, 2, {"task": "parity", "n_bits": n_bits})


def gen_parity(n_bits: int, n_samples: int, seed: int) -> Dataset:
    """Uniform random bit vectors labelled by their XOR.

    Labels are drawn as a balanced shuffled sequence and the last bit is set
    to match, which keeps the bit vectors uniform while the classes stay
    balanced to within one sample.
    """
    if not 1 <= n_bits <= 16:
        raise ValueError("n_bits must lie in [1, 16]")
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    rng = RngStream(seed, (11,))
    labels = rng.permutation(np.arange(n_samples) % 2) if n_samples else np.zeros(0, dtype=np.int64)
    head = rng.integers(0, 2, size=(n_samples, n_bits - 1))
    last = (labels + head.sum(axis=1)) % 2
    x = np.concatenate([head, last[:, None]], axis=1)
    return Dataset(x, labels, 2, {"task": "parity", "n_bits": n_bits, "seed": seed})


def random_templates(n_classes: int, T: int, channels: int, seed: int, max_rate: float = 0.5) -> np.ndarray:
    return RngStream(seed, (13,)).uniform((n_classes, T, channels)) * max_rate


def gen_temporal_pattern(
    n_classes: int,
    T: int,
    channels: int,
    noise_rate: float,
    seed: int,
    n_samples: int = 300,
    templates: Optional[np.ndarray] = None,
    max_rate: float = 0.5,
) -> Dataset:
    """Bernoulli spike trains from per-class rate templates, shape ``(N, T, channels)``.

    A ``noise_rate`` fraction of entries (chosen independently per entry) is
    replaced by a fair coin flip.
    """
    if not 1 <= T <= 100:
        raise ValueError("T must lie in [1, 100]")
    if templates is None:
        templates = random_templates(n_classes, T, channels, seed, max_rate)
    pattern = SpikePattern(templates, noise_rate)
    if pattern.templates.shape != (n_classes, T, channels):
        raise ValueError(f"templates must have shape {(n_classes, T, channels)}")
    rng = RngStream(seed, (17,))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    rates = pattern.templates[labels]
    spikes = rng.uniform(rates.shape) < rates
    resample = rng.uniform(rates.shape) < noise_rate
    coin = rng.uniform(rates.shape) < 0.5
    x = np.where(resample, coin, spikes)
    meta = {"task": "temporal_pattern", "T": T, "channels": channels, "noise_rate": noise_rate, "seed": seed}
    return Dataset(x, labels, n_classes, meta)


def save_csv_dataset(ds: Dataset, path, feature_names: Optional[Sequence[str]] = None) -> None:
    x = ds.inputs.reshape(len(ds), -1)
    names = list(feature_names) if feature_names else [f"x{i}" for i in range(x.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["label"])
        for row, label in zip(x.astype(int), ds.targets):
            w.writerow(list(row) + [int(label)])


def load_csv_dataset(path, schema: Optional[dict] = None) -> Dataset:
    """Load a binary-feature CSV.

    ``schema`` may give ``features`` (column names, default: every column but
    the label), ``label`` (default ``"label"``) and ``classes`` (count,
    default: one more than the largest label seen).
    """
    schema = dict(schema or {})
    label_col = schema.pop("label", "label")
    features = schema.pop("features", None)
    n_classes = schema.pop("classes", None)
    if schema:
        raise DatasetError(f"unknown schema keys {sorted(schema)}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if label_col not in header:
            raise DatasetError(f"{path}: missing label column {label_col!r}")
        features = features or [c for c in header if c != label_col]
        missing = [c for c in features if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing feature columns {missing}")
        for line, rec in enumerate(reader, start=2):
            try:
                vals = [float(rec[c]) for c in features]
                label = int(rec[label_col])
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{line}: malformed row ({exc})") from None
            bad = [c for c, v in zip(features, vals) if v not in (0.0, 1.0)]
            if bad:
                raise DatasetError(f"{path}:{line}: non-binary value in column {bad[0]!r}")
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise DatasetError(f"{path}:{line}: unknown label {label}")
            rows.append(vals)
            labels.append(label)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(features))
    if n_classes is None:
        n_classes = max(labels) + 1 if labels else 1
    return Dataset(x, np.array(labels, dtype=np.int64), n_classes, {"source": str(path)})


def save_spike_jsonl(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        for x, y in zip(ds.inputs.astype(int), ds.targets):
            fh.write(json.dumps({"spikes": x.tolist(), "label": int(y)}) + "\n")


def load_spike_jsonl(path, n_classes: Optional[int] = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    xs, ys = [], []
    with open(path) as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
                x = np.array(rec["spikes"], dtype=np.float64)
                y = int(rec["label"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{line}: malformed record ({exc})") from None
            if x.ndim != 2 or np.any((x != 0) & (x != 1)):
                raise DatasetError(f"{path}:{line}: spikes must be a 0/1 grid")
            if xs and x.shape != xs[0].shape:
                raise DatasetError(f"{path}:{line}: grid shape {x.shape} differs from {xs[0].shape}")
            if y < 0 or (n_classes is not None and y >= n_classes):
                raise DatasetError(f"{path}:{line}: unknown label {y}")
            xs.append(x)
            ys.append(y)
    if n_classes is None:
        n_classes = max(ys) + 1 if ys else 1
    x = np.stack(xs) if xs else np.zeros((0, 0, 0))
    return Dataset(x, np.array(ys, dtype=np.int64), n_classes, {"source": str(path)})
