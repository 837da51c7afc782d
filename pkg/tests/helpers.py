"""Shared fixtures: small seeded layer instances for gradient checks."""
import numpy as np

from edgesupply import tensor as T
from edgesupply.encoders import Vocab
from edgesupply.features import FeatureBundle, ItemFeatures, SupplyInput, ranking_arrays, supply_arrays
from edgesupply.layers import (GRU, MLP, DeviceScene, Embedding, MMoE, SceneMMoE, TargetAttention, masked_mean_pool,
                               stack_steps)
from edgesupply.ranking import RankOutput, ranking_loss
from edgesupply.supply import supply_loss, uplift_from_logits


def _randomize(module, rng, scale=0.5):
    """Move every parameter to a random point (zero biases sit on ReLU kinks)."""
    params = module.named_parameters()
    for p in params.values():
        p.data = rng.normal(size=p.shape) * scale
    return params


def case_mlp(seed):
    rng = np.random.default_rng(seed)
    mlp = MLP(4, [5, 3], rng)
    x = rng.normal(size=(6, 4))
    c = rng.normal(size=(6, 3))
    return (lambda: T.sum(T.mul(mlp(x), c))), _randomize(mlp, rng)


def case_embedding(seed):
    rng = np.random.default_rng(seed)
    emb = Embedding(7, 3, rng)
    idx = rng.integers(0, 7, size=(4, 5))
    c = rng.normal(size=(4, 5, 3))
    return (lambda: T.sum(T.mul(emb(idx), c))), _randomize(emb, rng)


def case_gru(seed):
    rng = np.random.default_rng(seed)
    gru = GRU(3, 4, rng)
    seq = rng.normal(size=(3, 5, 3))
    mask = np.ones((3, 5))
    mask[1, 3:] = 0
    mask[2, 1:] = 0
    c = rng.normal(size=(3, 5, 4))
    d = rng.normal(size=(3, 4))

    def loss():
        states = gru.encode(seq, mask)
        return T.add(T.sum(T.mul(stack_steps(states), c)), T.sum(T.mul(masked_mean_pool(states, mask), d)))

    return loss, _randomize(gru, rng)


def case_attention(seed):
    rng = np.random.default_rng(seed)
    attn = TargetAttention(3, 4, 5, rng)
    target = rng.normal(size=(3, 3))
    seq = rng.normal(size=(3, 4, 4))
    mask = np.ones((3, 4))
    mask[0, 2:] = 0
    c = rng.normal(size=(3, 5))
    return (lambda: T.sum(T.mul(attn(target, seq, mask)[0], c))), _randomize(attn, rng)


def case_mmoe(seed):
    rng = np.random.default_rng(seed)
    m = MMoE(4, 3, 2, [5, 3], 2, [3, 1], rng)
    x = rng.normal(size=(6, 4))
    g = rng.normal(size=(6, 3))
    c = rng.normal(size=(2, 6, 1))

    def loss():
        a, b = m(x, g)
        return T.add(T.sum(T.mul(a, c[0])), T.sum(T.mul(b, c[1])))

    return loss, _randomize(m, rng)


def case_smmoe(seed):
    rng = np.random.default_rng(seed)
    m = SceneMMoE(4, 2, [5, 3], 2, [3, 1], rng)
    x = rng.normal(size=(6, 4))
    scenes = np.array([0, 1, 1, 0, 1, 0])
    c = rng.normal(size=(2, 6, 1))

    def loss():
        a, b = m(x, scenes)
        return T.add(T.sum(T.mul(a, c[0])), T.sum(T.mul(b, c[1])))

    return loss, _randomize(m, rng)


def _logit_params(rng, n):
    return {"a": T.parameter(rng.normal(size=(n, 1)), "a"), "b": T.parameter(rng.normal(size=(n, 1)), "b")}


def case_ranking_heads(seed):
    """BCE on the CTR head plus BCE on the CTCVR product."""
    rng = np.random.default_rng(seed)
    p = _logit_params(rng, 8)
    click = rng.integers(0, 2, size=8)
    buy = click * rng.integers(0, 2, size=8)

    def loss():
        ctr, cvr = T.sigmoid(p["a"]), T.sigmoid(p["b"])
        return ranking_loss(RankOutput(ctr, cvr, T.mul(ctr, cvr)), click, buy)

    return loss, p


def case_supply_special(seed):
    rng = np.random.default_rng(seed)
    p = _logit_params(rng, 8)
    v_l = rng.integers(0, 2, size=8)
    v_g = np.maximum(v_l, rng.integers(0, 2, size=8))
    return (lambda: supply_loss(uplift_from_logits(p["a"], p["b"], "special"), v_l, v_g, "special")), p


def case_supply_general(seed):
    rng = np.random.default_rng(seed)
    p = _logit_params(rng, 8)
    v_l = rng.integers(0, 3, size=8)
    v_g = v_l + rng.integers(0, 3, size=8)
    return (lambda: supply_loss(uplift_from_logits(p["a"], p["b"], "general"), v_l, v_g, "general")), p


GRADIENT_CASES = {
    "mlp": case_mlp,
    "embedding": case_embedding,
    "gru": case_gru,
    "attention": case_attention,
    "mmoe": case_mmoe,
    "smmoe": case_smmoe,
    "ranking_heads": case_ranking_heads,
    "supply_special": case_supply_special,
    "supply_general": case_supply_general,
}


def worst_gradient_error(name, n_points=20):
    worst = 0.0
    for seed in range(n_points):
        loss, params = GRADIENT_CASES[name](seed)
        worst = max(worst, T.gradient_check(loss, params, eps=1e-5))
    return worst


SMALL_VOCAB = Vocab(n_items=50, n_categories=5, page_size=6)


def random_item(rng, vocab=SMALL_VOCAB):
    i = int(rng.integers(0, vocab.n_items))
    return ItemFeatures(i, i % vocab.n_categories, tuple(rng.random(4)), float(rng.random()), float(rng.random()))


def random_clicks(rng, n, vocab=SMALL_VOCAB):
    return tuple((int(i), int(i) % vocab.n_categories, float(rng.random()))
                 for i in rng.integers(0, vocab.n_items, size=n))


def _context(rng):
    return tuple(rng.random(6)), int(rng.integers(0, 24)), int(rng.integers(0, 7))


def random_bundles(rng, n, vocab=SMALL_VOCAB, click_seq_len=4, scene=None):
    out = []
    for _ in range(n):
        device, hour, weekday = _context(rng)
        sc = DeviceScene(int(rng.integers(0, 2))) if scene is None else scene
        out.append(FeatureBundle(random_item(rng, vocab), device, hour, weekday,
                                 random_clicks(rng, int(rng.integers(0, click_seq_len + 1)), vocab),
                                 int(rng.integers(0, vocab.page_size)), sc))
    return out


def random_supply_inputs(rng, n, vocab=SMALL_VOCAB, click_seq_len=4):
    out = []
    for _ in range(n):
        device, hour, weekday = _context(rng)
        page = tuple(random_item(rng, vocab) for _ in range(int(rng.integers(1, vocab.page_size + 1))))
        window = int(rng.integers(1, len(page) + 1))
        out.append(SupplyInput(page, window, device, hour, weekday,
                               random_clicks(rng, int(rng.integers(0, click_seq_len + 1)), vocab),
                               window - 1, DeviceScene(int(rng.integers(0, 2)))))
    return out


def random_ranking_arrays(rng, n, vocab=SMALL_VOCAB, click_seq_len=4, scene=None):
    return ranking_arrays(random_bundles(rng, n, vocab, click_seq_len, scene), click_seq_len)


def random_supply_arrays(rng, n, vocab=SMALL_VOCAB, click_seq_len=4):
    return supply_arrays(random_supply_inputs(rng, n, vocab, click_seq_len), vocab.page_size, click_seq_len)
