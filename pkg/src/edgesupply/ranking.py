"""Device-aware mobile ranking (DMR) and the simplified point-wise baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoders import EmbeddingTables, ModelDims, Vocab
from .layers import GRU, MLP, Module, SceneMMoE, TargetAttention, masked_mean_pool, stack_steps
from .tensor import Tensor


@dataclass(frozen=True)
class ScoredItem:
    item_id: int
    p_ctr: float
    p_cvr: float
    p_ctcvr: float
    rank_value: float


@dataclass
class RankOutput:
    p_ctr: Tensor
    p_cvr: Tensor
    p_ctcvr: Tensor


def click_states(tables: EmbeddingTables, gru: GRU, arr: dict[str, np.ndarray], stacked: bool = True):
    """GRU states over the click sequences trimmed to the longest one, or ``None`` with no clicks.

    With ``click_group`` present the click arrays hold one row per group, not per item.
    """
    mask = arr["click_mask"]
    if not mask.any():
        return None
    n = int(mask.sum(axis=1).max())
    steps = tables.click_steps({k: arr[k][:, :n] for k in ("click_item", "click_cate", "click_stay")})
    states = gru.encode(steps, mask[:, :n])
    return (stack_steps(states) if stacked else states), mask[:, :n]


class DMR(Module):
    """Click GRU + target attention, target-item MLP, real-time MLP, scene-MMoE with CTR/CVR towers."""

    kind = "dmr"

    def __init__(self, vocab: Vocab, dims: ModelDims = ModelDims(), seed: int = 0):
        rng = np.random.default_rng([seed, 0xD3A])
        self.vocab, self.dims = vocab, dims
        self.tables = EmbeddingTables(vocab, dims.emb_dim, rng)
        self.click_gru = GRU(self.tables.click_step_dim, dims.gru_hidden, rng)
        self.attention = TargetAttention(self.tables.item_block_dim, dims.gru_hidden, dims.attn_dim, rng)
        self.item_mlp = MLP(self.tables.item_block_dim, [dims.item_hidden], rng, out_act="relu")
        self.rt_mlp = MLP(self.tables.device_block_dim, [dims.rt_hidden], rng, out_act="relu")
        x_dim = dims.attn_dim + dims.item_hidden + dims.rt_hidden
        self.smmoe = SceneMMoE(x_dim, dims.dmr_shared, dims.dmr_experts, 2, list(dims.tower), rng)
        self.named_parameters()

    def interest(self, arr: dict[str, np.ndarray], target: Tensor) -> Tensor:
        B = len(arr["item"])
        enc = click_states(self.tables, self.click_gru, arr)
        if enc is None:
            return Tensor(np.zeros((B, self.dims.attn_dim)))
        states, mask = enc
        group = arr.get("click_group")
        if group is not None:
            G, n, H = states.shape
            states = T.reshape(T.take(T.reshape(states, (G, n * H)), group), (B, n, H))
            mask = mask[group]
        out, _ = self.attention(target, states, mask)
        return out

    def forward(self, arr: dict[str, np.ndarray]) -> RankOutput:
        target = self.tables.item_block(arr["item"], arr["cate"], arr["item_dense"])
        x = T.concat([self.interest(arr, target), self.item_mlp(target),
                      self.rt_mlp(self.tables.device_block(arr["device"], arr["hour"], arr["weekday"]))], axis=-1)
        ctr_logit, cvr_logit = self.smmoe(x, arr["scene"])
        p_ctr = T.sigmoid(ctr_logit)
        p_cvr = T.sigmoid(cvr_logit)
        return RankOutput(p_ctr, p_cvr, T.mul(p_ctr, p_cvr))

    __call__ = forward

    def loss(self, out: RankOutput, click, ctcvr) -> Tensor:
        return ranking_loss(out, click, ctcvr)


class BaselineRanker(Module):
    """GRU feature encoder + MLP point-wise CTR head; no scene experts.

    CVR comes from the server score shipped with the item.
    """

    kind = "baseline"

    def __init__(self, vocab: Vocab, dims: ModelDims = ModelDims(), seed: int = 0):
        rng = np.random.default_rng([seed, 0xBA5E])
        self.vocab, self.dims = vocab, dims
        self.tables = EmbeddingTables(vocab, dims.emb_dim, rng)
        self.click_gru = GRU(self.tables.click_step_dim, dims.gru_hidden, rng)
        in_dim = self.tables.item_block_dim + self.tables.device_block_dim + dims.gru_hidden
        self.head = MLP(in_dim, [*dims.baseline_hidden, 1], rng)
        self.named_parameters()

    def forward(self, arr: dict[str, np.ndarray]) -> RankOutput:
        B = len(arr["item"])
        pooled = Tensor(np.zeros((B, self.dims.gru_hidden)))
        enc = click_states(self.tables, self.click_gru, arr, stacked=False)
        if enc is not None:
            pooled = masked_mean_pool(*enc)
            if "click_group" in arr:
                pooled = T.take(pooled, arr["click_group"])
        x = T.concat([self.tables.item_block(arr["item"], arr["cate"], arr["item_dense"]),
                      self.tables.device_block(arr["device"], arr["hour"], arr["weekday"]), pooled], axis=-1)
        p_ctr = T.sigmoid(self.head(x))
        p_cvr = Tensor(arr["item_dense"][:, -1:])
        return RankOutput(p_ctr, p_cvr, T.mul(p_ctr, p_cvr))

    __call__ = forward

    def loss(self, out: RankOutput, click, ctcvr) -> Tensor:
        return T.bce_loss(out.p_ctr, np.asarray(click, dtype=np.float64).reshape(out.p_ctr.shape))


def ranking_loss(out: RankOutput, click, ctcvr) -> Tensor:
    """BCE on CTR plus BCE on CTCVR; CVR is only supervised through the product."""
    y_clk = np.asarray(click, dtype=np.float64).reshape(out.p_ctr.shape)
    y_buy = np.asarray(ctcvr, dtype=np.float64).reshape(out.p_ctcvr.shape)
    if (y_buy > y_clk).any():
        raise ValueError("ctcvr label exceeds click label")
    return T.add(T.bce_loss(out.p_ctr, y_clk), T.bce_loss(out.p_ctcvr, y_buy))


def dmr_forward(model, arr) -> list[ScoredItem]:
    out = model(arr)
    return scored_items(arr["item"] - 1, out)


def scored_items(item_ids, out: RankOutput, blend: tuple[float, float] = (0.0, 1.0)) -> list[ScoredItem]:
    a, b = blend
    ctr = out.p_ctr.data.ravel()
    cvr = out.p_cvr.data.ravel()
    ctcvr = out.p_ctcvr.data.ravel()
    value = ctcvr if (a, b) == (0.0, 1.0) else ctr ** a * ctcvr ** b
    return [ScoredItem(int(i), float(c), float(v), float(cc), float(r))
            for i, c, v, cc, r in zip(item_ids, ctr, cvr, ctcvr, value)]


def rank_page(scored: Sequence[ScoredItem]) -> list[int]:
    """Descending rank value, then descending p_ctr, then ascending item id."""
    return [s.item_id for s in sorted(scored, key=lambda s: (-s.rank_value, -s.p_ctr, s.item_id))]


RANKERS = {"dmr": DMR, "baseline": BaselineRanker}
