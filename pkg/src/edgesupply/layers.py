"""Differentiable building blocks: MLP, GRU, target attention, MMoE, scene-MMoE.

All layers work on batches. Sequences are ``(B, T, F)`` arrays with a
``(B, T)`` 0/1 mask; masked steps leave the GRU state untouched and are
excluded from pooling and attention.

GRU recurrence (reset/update/candidate form)::

    z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
    r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
    n_t = tanh(x_t W_n + (r_t * h_{t-1}) U_n + b_n)
    h_t = (1 - z_t) * n_t + z_t * h_{t-1},     h_0 = 0
"""
from __future__ import annotations

import math
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class DeviceScene(IntEnum):
    ANDROID = 0
    IOS = 1

    @classmethod
    def parse(cls, value) -> "DeviceScene":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                pass
        elif isinstance(value, (int, np.integer)) and int(value) in (0, 1):
            return cls(int(value))
        raise ValueError(f"unknown device scene {value!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Parameter container; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for attr in sorted(vars(self)):
            value = vars(self)[attr]
            path = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                value.name = path
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return dict(sorted(out.items()))

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.named_parameters().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = T.parameter(_glorot(rng, in_dim, out_dim))
        self.b = T.parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x) -> Tensor:
        x = T._as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {self.W.shape}")
        y = T.matmul(x, self.W)
        return T.add(y, self.b) if self.b is not None else y


_ACTIVATIONS = {"relu": T.relu, "sigmoid": T.sigmoid, "tanh": T.tanh, "softplus": T.softplus, None: None}


class MLP(Module):
    """Affine layers with ReLU between them; ``out_act`` applies to the last layer."""

    def __init__(self, in_dim: int, dims: Sequence[int], rng: np.random.Generator, out_act: str | None = None):
        if not dims:
            raise ValueError("MLP needs at least one layer")
        self.in_dim = in_dim
        self.out_dim = dims[-1]
        self.out_act = out_act
        sizes = [in_dim, *dims]
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x) -> Tensor:
        h = T._as_tensor(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < last:
                h = T.relu(h)
        act = _ACTIVATIONS[self.out_act]
        return act(h) if act is not None else h


def mlp_forward(mlp: MLP, x) -> np.ndarray:
    """Single-vector convenience wrapper."""
    return mlp(np.asarray(x, dtype=np.float64)).data


class Embedding(Module):
    """Lookup table; index 0 is reserved and out-of-vocabulary ids map to it."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, scale: float = 0.1):
        self.vocab, self.dim = vocab, dim
        self.table = T.parameter(rng.normal(0.0, scale, size=(vocab, dim)))

    def clean_index(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=np.int64)
        return np.where((idx < 0) | (idx >= self.vocab), 0, idx)

    def __call__(self, index) -> Tensor:
        return T.take(self.table, self.clean_index(index))


class GRU(Module):
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.in_dim, self.hidden = in_dim, hidden
        H = hidden
        self.W = T.parameter(np.concatenate([_glorot(rng, in_dim, H) for _ in range(3)], axis=1))
        self.U_zr = T.parameter(np.concatenate([_glorot(rng, H, H) for _ in range(2)], axis=1))
        self.U_n = T.parameter(_glorot(rng, H, H))
        self.b = T.parameter(np.zeros(3 * H))

    def encode(self, seq, mask=None) -> list[Tensor]:
        """Hidden state per step for a ``(B, T, in_dim)`` batch."""
        seq = T._as_tensor(seq)
        if seq.ndim != 3 or seq.shape[2] != self.in_dim:
            raise ShapeError(f"gru: input shape {seq.shape} does not match weight shape {self.W.shape}")
        B, steps, _ = seq.shape
        if steps == 0:
            raise ShapeError("gru: empty sequence")
        mask = np.ones((B, steps)) if mask is None else np.asarray(mask, dtype=np.float64)
        H = self.hidden
        xw = T.add(T.matmul(seq, self.W), self.b)
        h = Tensor(np.zeros((B, H)))
        states = []
        for t in range(steps):
            xt = xw[:, t, :]
            if t == 0:
                # h_0 = 0 removes the recurrent terms
                zr = T.sigmoid(xt[:, :2 * H])
                n = T.tanh(xt[:, 2 * H:])
                h_new = T.sub(n, T.mul(zr[:, :H], n))
            else:
                zr = T.sigmoid(T.add(xt[:, :2 * H], T.matmul(h, self.U_zr)))
                z, r = zr[:, :H], zr[:, H:]
                n = T.tanh(T.add(xt[:, 2 * H:], T.matmul(T.mul(r, h), self.U_n)))
                h_new = T.add(n, T.mul(z, T.sub(h, n)))
            m = mask[:, t:t + 1]
            if m.all():
                h = h_new
            elif t == 0:
                h = T.mul(h_new, m)
            else:
                h = T.add(T.mul(h_new, m), T.mul(h, 1.0 - m))
            states.append(h)
        return states


def gru_encode(gru: GRU, sequence: Sequence[Sequence[float]]) -> list[np.ndarray]:
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ShapeError("gru_encode: expected a non-empty list of equal-length vectors")
    return [s.data[0] for s in gru.encode(seq[None])]


def masked_mean_pool(states: Sequence[Tensor], mask=None) -> Tensor:
    """Mean over the unmasked steps; rows with no valid step pool to zeros."""
    if not states:
        raise ShapeError("mean_pool: no states")
    B = states[0].shape[0]
    mask = np.ones((B, len(states))) if mask is None else np.asarray(mask, dtype=np.float64)
    total = None
    for t, h in enumerate(states):
        m = mask[:, t:t + 1]
        term = h if m.all() else T.mul(h, m)
        total = term if total is None else T.add(total, term)
    lengths = mask.sum(axis=1, keepdims=True)
    return T.mul(total, 1.0 / np.maximum(lengths, 1.0))


def mean_pool(states: Sequence[Sequence[float]]) -> np.ndarray:
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim != 2 or len(arr) == 0:
        raise ShapeError("mean_pool: expected a non-empty list of equal-length vectors")
    return T.mean(arr, axis=0).data


def stack_steps(states: Sequence[Tensor]) -> Tensor:
    """List of ``(B, H)`` -> ``(B, T, H)``."""
    B, H = states[0].shape
    return T.concat([T.reshape(s, (B, 1, H)) for s in states], axis=1)


class TargetAttention(Module):
    """Single-head ``softmax(Q K^T / sqrt(d)) V`` with the query from the target item."""

    def __init__(self, query_dim: int, key_dim: int, d: int, rng: np.random.Generator):
        if d <= 0:
            raise ValueError("attention dim must be positive")
        self.d = d
        self.Wq = T.parameter(_glorot(rng, query_dim, d))
        self.Wk = T.parameter(_glorot(rng, key_dim, d))
        self.Wv = T.parameter(_glorot(rng, key_dim, d))

    def __call__(self, target, seq, mask=None) -> tuple[Tensor, Tensor]:
        target, seq = T._as_tensor(target), T._as_tensor(seq)
        B, steps, _ = seq.shape
        mask = np.ones((B, steps)) if mask is None else np.asarray(mask, dtype=np.float64)
        q = T.reshape(T.matmul(target, self.Wq), (B, 1, self.d))
        k = T.matmul(seq, self.Wk)
        v = T.matmul(seq, self.Wv)
        scores = T.mul(T.sum(T.mul(q, k), axis=-1), 1.0 / math.sqrt(self.d))
        if not mask.all():
            scores = T.add(scores, (mask - 1.0) * 1e9)
        w = T.softmax(scores, axis=-1)
        if not mask.all():
            # fully masked rows come out as the zero vector
            w = T.mul(w, mask.max(axis=1, keepdims=True))
        out = T.sum(T.mul(T.reshape(w, (B, steps, 1)), v), axis=1)
        return out, w


def target_attention(attn: TargetAttention, target, sequence) -> np.ndarray:
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise ShapeError("target_attention: empty sequence")
    out, _ = attn(np.asarray(target, dtype=np.float64)[None], seq[None])
    return out.data[0]


def _mix(gate: Tensor, experts: Sequence[Tensor]) -> Tensor:
    total = None
    for e, out in enumerate(experts):
        term = T.mul(gate[:, e:e + 1], out)
        total = term if total is None else T.add(total, term)
    return total


class MMoE(Module):
    """Multi-gate mixture of experts.

    ``task_t = tower_t(fuse(sum_e gate_t[e] * expert_e(x)))`` with
    ``gate_t = softmax(W_t g + b_t)`` over a separate gate input ``g``.
    """

    def __init__(self, in_dim: int, gate_dim: int, n_experts: int, expert_dims: Sequence[int],
                 n_tasks: int, tower_dims: Sequence[int], rng: np.random.Generator, fusion: str | None = "relu"):
        self.in_dim, self.gate_dim = in_dim, gate_dim
        self.fusion = fusion
        self.experts = [MLP(in_dim, expert_dims, rng, out_act="relu") for _ in range(n_experts)]
        self.gates = [Linear(gate_dim, n_experts, rng) for _ in range(n_tasks)]
        self.towers = [MLP(expert_dims[-1], tower_dims, rng) for _ in range(n_tasks)]

    def gate_weights(self, gate_input) -> list[Tensor]:
        return [T.softmax(g(gate_input), axis=-1) for g in self.gates]

    def __call__(self, x, gate_input) -> list[Tensor]:
        x = T._as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"mmoe: input shape {x.shape} does not match expert input dim {self.in_dim}")
        outs = [e(x) for e in self.experts]
        fuse = _ACTIVATIONS[self.fusion]
        results = []
        for gate, tower in zip(self.gate_weights(gate_input), self.towers):
            mixed = _mix(gate, outs)
            results.append(tower(fuse(mixed) if fuse else mixed))
        return results


class SceneMMoE(Module):
    """Shared experts plus one Android and one IOS expert.

    For each row only the expert of its own scene joins the pool; the gate of
    each task is a softmax over ``n_shared + 1`` slots, the last slot being the
    active scene expert.
    """

    def __init__(self, in_dim: int, n_shared: int, expert_dims: Sequence[int], n_tasks: int,
                 tower_dims: Sequence[int], rng: np.random.Generator):
        self.in_dim = in_dim
        self.shared = [MLP(in_dim, expert_dims, rng, out_act="relu") for _ in range(n_shared)]
        self.android = MLP(in_dim, expert_dims, rng, out_act="relu")
        self.ios = MLP(in_dim, expert_dims, rng, out_act="relu")
        self.gates = [Linear(in_dim, n_shared + 1, rng) for _ in range(n_tasks)]
        self.towers = [MLP(expert_dims[-1], tower_dims, rng) for _ in range(n_tasks)]

    def scene_expert_output(self, x: Tensor, scenes: np.ndarray) -> Tensor:
        is_ios = scenes == DeviceScene.IOS
        if not is_ios.any():
            return self.android(x)
        if is_ios.all():
            return self.ios(x)
        m_ios = is_ios.astype(np.float64)[:, None]
        return T.add(T.mul(self.android(x), 1.0 - m_ios), T.mul(self.ios(x), m_ios))

    def __call__(self, x, scenes) -> list[Tensor]:
        x = T._as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"smmoe: input shape {x.shape} does not match expert input dim {self.in_dim}")
        scenes = np.asarray([DeviceScene.parse(s) for s in np.atleast_1d(scenes)], dtype=np.int64)
        if len(scenes) != x.shape[0]:
            raise ShapeError(f"smmoe: {len(scenes)} scene ids for batch of {x.shape[0]}")
        outs = [e(x) for e in self.shared]
        outs.append(self.scene_expert_output(x, scenes))
        return [tower(T.relu(_mix(T.softmax(g(x), axis=-1), outs)))
                for g, tower in zip(self.gates, self.towers)]

    def gate_weights(self, x) -> list[Tensor]:
        return [T.softmax(g(x), axis=-1) for g in self.gates]
