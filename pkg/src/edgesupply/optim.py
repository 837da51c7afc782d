"""Adagrad with an optional inverse-time learning-rate decay, plus checkpoints."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

ADAGRAD_EPS = 1e-8
CHECKPOINT_MAGIC = b"PPKT1"


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adagrad:
    """``lr_t = lr / (1 + decay * t)`` where ``t`` counts completed steps.

    ``decay=0`` is plain Adagrad. ``initial_accumulator`` seeds every squared
    gradient sum; with 0 the first step moves each weight by a full ``lr``
    regardless of the gradient's scale.
    """

    def __init__(self, lr: float = 0.005, decay: float = 0.0, initial_accumulator: float = 0.0):
        if lr < 0 or decay < 0 or initial_accumulator < 0:
            raise ValueError("lr, decay and initial_accumulator must be non-negative")
        self.lr = lr
        self.decay = decay
        self.initial_accumulator = initial_accumulator
        self.state = OptimizerState()

    def current_lr(self) -> float:
        return self.lr / (1.0 + self.decay * self.state.step)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        adagrad_step(params, grads, self.state, self.current_lr(), self.initial_accumulator)


def adagrad_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                 state: OptimizerState, lr: float, initial_accumulator: float = 0.0) -> None:
    """In-place update of ``params`` and ``state``."""
    missing = [name for name in params if name not in grads]
    if missing:
        raise TrainingError(f"no gradient for parameters: {', '.join(sorted(missing))}")
    for name in sorted(params):
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.step}")
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    for name in sorted(params):
        g = grads[name]
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.full_like(g, initial_accumulator)
        acc = acc + g * g
        state.accumulators[name] = acc
        p = params[name]
        p.data = p.data - lr * g / (np.sqrt(acc) + ADAGRAD_EPS)
    state.step += 1


# -- checkpoint file ---------------------------------------------------------
#
# b"PPKT1", then for each parameter in name order:
#   u64 name length | name bytes (utf-8) | u64 rank | rank x u64 dims | f64 data
# all little-endian, data row-major.

def checkpoint_bytes(params: Mapping[str, Tensor | np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a PPKT1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = len(CHECKPOINT_MAGIC)
    while pos < len(blob):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())
