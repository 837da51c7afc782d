"""Mobile Supply: local/global list value, non-negative uplift, paging trigger.

The uplift head is reparameterized so the estimate can never go negative::

    v_l = sigmoid(s_l)
    v_g = sigmoid(s_l + softplus(s_u))
    u_p = v_g - v_l

Under the general (count) objective both heads are softplus outputs instead
and ``v_g = v_l + softplus(s_u)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import EmbeddingTables, ModelDims, Vocab
from .features import OBJECTIVES, FeatureError
from .layers import GRU, MLP, Embedding, MMoE, Module, masked_mean_pool
from .tensor import Tensor

ABLATIONS = (None, "rie", "cie")


@dataclass(frozen=True)
class SupplyConfig:
    alpha: float = 0.05
    objective: str = "special"
    checkpoint_every: int = 4
    max_auto_pages: int = 3

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class UpliftEstimate:
    v_l: Tensor
    v_g: Tensor
    u_p: Tensor

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.v_l.data.ravel().tolist(), self.v_g.data.ravel().tolist(),
                        self.u_p.data.ravel().tolist()))


def uplift_from_logits(s_l, s_u, objective: str = "special") -> UpliftEstimate:
    if objective == "special":
        v_l = T.sigmoid(s_l)
        v_g = T.sigmoid(T.add(s_l, T.softplus(s_u)))
    elif objective == "general":
        v_l = T.softplus(s_l)
        v_g = T.add(v_l, T.softplus(s_u))
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return UpliftEstimate(v_l, v_g, T.sub(v_g, v_l))


class SupplyModel(Module):
    """RIE (click GRU + mean pool, real-time MLP), CIE (page GRU + mean pool), uplift MMoE.

    ``ablate="rie"`` or ``"cie"`` replaces that branch's output with zeros; the
    branch parameters stay in the model but never reach the tape.
    """

    def __init__(self, vocab: Vocab, dims: ModelDims = ModelDims(), seed: int = 0,
                 objective: str = "special", ablate: str | None = None):
        if ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablate!r}")
        rng = np.random.default_rng([seed, 0x5E7])
        self.vocab, self.dims, self.objective, self.ablate = vocab, dims, objective, ablate
        self.tables = EmbeddingTables(vocab, dims.emb_dim, rng)
        self.position = Embedding(vocab.page_size + 1, dims.emb_dim, rng)
        self.rie_gru = GRU(self.tables.click_step_dim, dims.gru_hidden, rng)
        self.rie_mlp = MLP(self.tables.device_block_dim, [dims.rt_hidden], rng, out_act="relu")
        self.cie_gru = GRU(self.tables.item_block_dim + 1, dims.gru_hidden, rng)
        x_dim = 2 * dims.gru_hidden + dims.rt_hidden
        self.um = MMoE(x_dim, dims.emb_dim, dims.supply_n_experts, dims.supply_experts, 2,
                       list(dims.tower), rng, fusion="relu")
        self.named_parameters()

    def rie(self, arr: dict[str, np.ndarray]) -> Tensor:
        B = len(arr["p_cv"])
        if self.ablate == "rie":
            return Tensor(np.zeros((B, self.dims.gru_hidden + self.dims.rt_hidden)))
        mask = arr["click_mask"]
        pooled = Tensor(np.zeros((B, self.dims.gru_hidden)))
        if mask.any():
            n = max(int(mask.sum(axis=1).max()), 1)
            steps = self.tables.click_steps({k: arr[k][:, :n] for k in ("click_item", "click_cate", "click_stay")})
            pooled = masked_mean_pool(self.rie_gru.encode(steps, mask[:, :n]), mask[:, :n])
        rt = self.rie_mlp(self.tables.device_block(arr["device"], arr["hour"], arr["weekday"]))
        return T.concat([pooled, rt], axis=-1)

    def cie(self, arr: dict[str, np.ndarray]) -> Tensor:
        B = len(arr["p_cv"])
        if self.ablate == "cie":
            return Tensor(np.zeros((B, self.dims.gru_hidden)))
        mask = arr["page_mask"]
        if not mask[:, 0].all():
            raise FeatureError("empty page in supply batch")
        n = int(mask.sum(axis=1).max())
        dense = arr["page_dense"][:, :n]
        block = T.concat([self.tables.item(arr["page_item"][:, :n]), self.tables.cate(arr["page_cate"][:, :n]),
                          dense], axis=-1)
        return masked_mean_pool(self.cie_gru.encode(block, mask[:, :n]), mask[:, :n])

    def logits(self, arr: dict[str, np.ndarray]) -> tuple[Tensor, Tensor]:
        p_cv = np.asarray(arr["p_cv"])
        if (p_cv < 0).any() or (p_cv >= self.vocab.page_size).any():
            raise FeatureError("position of the viewed item is outside the page")
        x = T.concat([self.rie(arr), self.cie(arr)], axis=-1)
        s_l, s_u = self.um(x, self.position(p_cv + 1))
        return s_l, s_u

    def forward(self, arr: dict[str, np.ndarray]) -> UpliftEstimate:
        s_l, s_u = self.logits(arr)
        return uplift_from_logits(s_l, s_u, self.objective)

    __call__ = forward


def rie_forward(model: SupplyModel, arr) -> np.ndarray:
    return model.rie(arr).data


def cie_forward(model: SupplyModel, arr) -> np.ndarray:
    return model.cie(arr).data


def um_forward(model: SupplyModel, arr) -> UpliftEstimate:
    return model.forward(arr)


def supply_loss(est: UpliftEstimate, v_l_labels, v_g_labels, objective: str = "special") -> Tensor:
    """Special: BCE on both heads. General: squared error on both heads."""
    yl = np.asarray(v_l_labels, dtype=np.float64).reshape(est.v_l.shape)
    yg = np.asarray(v_g_labels, dtype=np.float64).reshape(est.v_g.shape)
    if (yg < yl).any():
        raise ValueError("global value label below local value label")
    if objective == "special":
        if not (np.isin(yl, (0.0, 1.0)).all() and np.isin(yg, (0.0, 1.0)).all()):
            raise ValueError("special objective needs 0/1 labels")
        return T.add(T.bce_loss(est.v_g, yg), T.bce_loss(est.v_l, yl))
    if objective == "general":
        if (yl < 0).any():
            raise ValueError("general objective needs non-negative counts")
        return T.add(T.mse_loss(est.v_g, yg), T.mse_loss(est.v_l, yl))
    raise ValueError(f"unknown objective {objective!r}")


def should_page(u_p: float, config: SupplyConfig, auto_pages_used: int = 0) -> bool:
    """Auto-request the next page when the uplift is below alpha and budget remains."""
    return u_p < config.alpha and auto_pages_used < config.max_auto_pages


def uplift_label(v_l, v_g) -> np.ndarray:
    """Positive-uplift indicator under binary labels: the page has an order still to come."""
    return ((np.asarray(v_g) >= 1) & (np.asarray(v_l) == 0)).astype(np.int64)
