"""Adam, a reduce-on-plateau learning-rate schedule, and checkpoint files."""

from __future__ import annotations

import base64
import binascii
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stale evaluations.

    An evaluation is stale unless the metric beats the best seen so far by at
    least ``threshold`` (lower is better).
    """

    lr: float
    factor: float = 0.5
    patience: int = 3
    threshold: float = 1e-4
    best: float = float("inf")
    bad_evals: int = 0

    def step(self, metric: float) -> float:
        if not np.isfinite(metric):
            raise ValueError(f"scheduler metric must be finite, got {metric}")
        if metric < self.best - self.threshold:
            self.best = metric
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            if self.bad_evals >= self.patience:
                self.lr *= self.factor
                self.bad_evals = 0
        return self.lr


def plateau_scheduler(state: PlateauScheduler, metric: float) -> float:
    return state.step(metric)


# -- checkpoint files ------------------------------------------------------
#
#   CKPT v1
#   META <key> <value>          (free-form scalars: step, lr, scheduler state, config)
#   <name> <d0xd1x...> <base64 little-endian float64>
#
# optimizer moments are stored as records named ``adam.m/<param>`` and
# ``adam.v/<param>``.


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape: tuple) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"record size {arr.size} does not match shape {shape}")
    return arr.reshape(shape)


def _shape_text(shape: tuple) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple:
    if text == "scalar":
        return ()
    return tuple(int(d) for d in text.split("x"))


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, Tensor],
    adam: AdamState | None = None,
    meta: Mapping[str, str] | None = None,
) -> None:
    lines = ["CKPT v1"]
    for key, value in (meta or {}).items():
        if any(c.isspace() for c in str(key)):
            raise CheckpointError(f"meta key contains whitespace: {key!r}")
        lines.append(f"META {key} {value}")
    if adam is not None:
        lines.append(f"META adam.step {adam.step}")
    for name, p in params.items():
        lines.append(f"{name} {_shape_text(p.shape)} {_encode(p.data)}")
    if adam is not None:
        for name in params:
            if name in adam.m:
                shape = _shape_text(adam.m[name].shape)
                lines.append(f"adam.m/{name} {shape} {_encode(adam.m[name])}")
                lines.append(f"adam.v/{name} {shape} {_encode(adam.v[name])}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: AdamState
    meta: dict[str, str]


def load_checkpoint(path: str | Path) -> Checkpoint:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != "CKPT v1":
        raise CheckpointError(f"{path}: missing 'CKPT v1' header")
    params: dict[str, np.ndarray] = {}
    adam = AdamState()
    meta: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("META "):
            parts = line.split(" ", 2)
            if len(parts) != 3:
                raise CheckpointError(f"{path}:{lineno}: malformed META line")
            meta[parts[1]] = parts[2]
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{lineno}: expected '<name> <shape> <data>'")
        name, shape_text, blob = parts
        try:
            arr = _decode(blob, _parse_shape(shape_text))
        except (ValueError, binascii.Error) as exc:
            raise CheckpointError(f"{path}:{lineno}: {exc}") from exc
        if name.startswith("adam.m/"):
            adam.m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            adam.v[name[7:]] = arr
        else:
            params[name] = arr
    adam.step = int(meta.pop("adam.step", 0))
    return Checkpoint(params=params, adam=adam, meta=meta)
