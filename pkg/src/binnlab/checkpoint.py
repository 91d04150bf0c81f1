"""Versioned JSON checkpoints with base64 little-endian float64 arrays.

Training randomness is keyed by ``(seed, purpose, epoch, batch)``, so the
seed and the next epoch index are the complete RNG cursor: resuming from a
checkpoint replays exactly the draws an uninterrupted run would make.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .networks import Network, NetworkSpec
from .training import OptimizerState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def encode_array(a) -> dict:
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    try:
        raw = base64.b64decode(d["data"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array record ({exc})") from None
    a = np.frombuffer(raw, dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"array has {a.size} values, shape {shape} needs {int(np.prod(shape))}")
    return a.reshape(shape).astype(np.float64)


def _encode_dict(d: dict) -> dict:
    return {k: encode_array(d[k]) for k in sorted(d)}


def _decode_dict(d: dict) -> dict:
    return {k: decode_array(v) for k, v in d.items()}


@dataclass
class Checkpoint:
    net: Network
    optimizer: OptimizerState
    epoch: int  # next epoch to run
    seed: int
    config: Optional[dict] = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    opt = ckpt.optimizer
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": ckpt.net.spec.to_dict(),
        "params": _encode_dict(ckpt.net.params),
        "optimizer": {
            "step_count": opt.step_count,
            "lr_weights": opt.lr_weights,
            "lr_scales": opt.lr_scales,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "first_moment": _encode_dict(opt.first_moment),
            "second_moment": _encode_dict(opt.second_moment),
        },
        "rng": {"seed": ckpt.seed, "next_epoch": ckpt.epoch},
        "epoch": ckpt.epoch,
        "config": ckpt.config,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path} is not valid JSON ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    try:
        spec = NetworkSpec.from_dict(doc["spec"])
        net = Network(spec, _decode_dict(doc["params"]))
        o = doc["optimizer"]
        opt = OptimizerState(
            _decode_dict(o["first_moment"]),
            _decode_dict(o["second_moment"]),
            step_count=int(o["step_count"]),
            lr_weights=float(o["lr_weights"]),
            lr_scales=float(o["lr_scales"]),
            beta1=float(o["beta1"]),
            beta2=float(o["beta2"]),
            eps=float(o["eps"]),
        )
        if set(opt.first_moment) != set(net.params) or set(opt.second_moment) != set(net.params):
            raise CheckpointError("optimizer state does not match the network parameters")
        return Checkpoint(net, opt, int(doc["epoch"]), int(doc["rng"]["seed"]), doc.get("config"))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: incompatible checkpoint ({exc})") from None
