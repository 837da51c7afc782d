"""Embedding tables and the shared dense blocks built from feature arrays."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .features import N_DEVICE_SCALARS, N_INFO
from .layers import Embedding, Module
from .tensor import Tensor


@dataclass(frozen=True)
class ModelDims:
    emb_dim: int = 8
    gru_hidden: int = 16
    rt_hidden: int = 16
    item_hidden: int = 16
    attn_dim: int = 16
    dmr_experts: tuple[int, ...] = (64, 32)
    dmr_shared: int = 2
    tower: tuple[int, ...] = (8, 1)
    supply_experts: tuple[int, ...] = (64, 32)
    supply_n_experts: int = 2
    baseline_hidden: tuple[int, ...] = (32, 16)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)


@dataclass(frozen=True)
class Vocab:
    n_items: int
    n_categories: int
    page_size: int

    @classmethod
    def from_world(cls, cfg) -> "Vocab":
        return cls(cfg.n_items, cfg.n_categories, cfg.page_size)


class EmbeddingTables(Module):
    """Item, category, hour and weekday tables (index 0 reserved)."""

    def __init__(self, vocab: Vocab, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.item = Embedding(vocab.n_items + 1, dim, rng)
        self.cate = Embedding(vocab.n_categories + 1, dim, rng)
        self.hour = Embedding(24, dim, rng)
        self.weekday = Embedding(7, dim, rng)

    @property
    def item_block_dim(self) -> int:
        return 2 * self.dim + N_INFO + 2

    @property
    def device_block_dim(self) -> int:
        return N_DEVICE_SCALARS + 2 * self.dim

    @property
    def click_step_dim(self) -> int:
        return 2 * self.dim + 1

    def item_block(self, ids, cates, dense) -> Tensor:
        return T.concat([self.item(ids), self.cate(cates), dense], axis=-1)

    def device_block(self, device, hour, weekday) -> Tensor:
        return T.concat([device, self.hour(hour), self.weekday(weekday)], axis=-1)

    def click_steps(self, arr: dict[str, np.ndarray]) -> Tensor:
        return T.concat([self.item(arr["click_item"]), self.cate(arr["click_cate"]),
                         arr["click_stay"][..., None]], axis=-1)

    def encode(self, arr: dict[str, np.ndarray]) -> Tensor:
        """Flat bundle vector: item block, device block, mean click-item embedding."""
        mask = arr["click_mask"]
        clicks = T.mul(self.item(arr["click_item"]), mask[..., None])
        pooled = T.mul(T.sum(clicks, axis=1), 1.0 / np.maximum(mask.sum(axis=1, keepdims=True), 1.0))
        return T.concat([self.item_block(arr["item"], arr["cate"], arr["item_dense"]),
                         self.device_block(arr["device"], arr["hour"], arr["weekday"]), pooled], axis=-1)
