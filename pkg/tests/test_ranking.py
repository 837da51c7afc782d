import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgesupply import tensor as T
from edgesupply.layers import DeviceScene
from edgesupply.ranking import DMR, BaselineRanker, RankOutput, ScoredItem, dmr_forward, rank_page, ranking_loss

from helpers import SMALL_VOCAB, _randomize, random_ranking_arrays


def _dmr(seed=0):
    m = DMR(SMALL_VOCAB, seed=seed)
    _randomize(m, np.random.default_rng(seed + 50), scale=0.3)
    return m


def _item(i, ctcvr, ctr=0.5):
    return ScoredItem(i, ctr, ctcvr / ctr, ctcvr, ctcvr)


def test_ctcvr_is_exact_product():
    m = _dmr()
    out = m(random_ranking_arrays(np.random.default_rng(0), 500))
    assert np.array_equal(out.p_ctcvr.data, out.p_ctr.data * out.p_cvr.data)
    assert (out.p_ctcvr.data <= out.p_ctr.data).all() and (out.p_ctcvr.data <= out.p_cvr.data).all()


def test_ctcvr_example():
    out = RankOutput(T.Tensor(np.array([0.4])), T.Tensor(np.array([0.3])), T.mul(np.array([0.4]), np.array([0.3])))
    assert out.p_ctcvr.item() == pytest.approx(0.12, abs=1e-15)


def test_android_scores_ignore_ios_experts():
    m = _dmr(1)
    rng = np.random.default_rng(2)
    arr = random_ranking_arrays(rng, 40)
    before = m(arr)
    for p in m.smmoe.ios.named_parameters().values():
        p.data = rng.normal(size=p.shape)
    after = m(arr)
    android = arr["scene"] == DeviceScene.ANDROID
    assert android.any() and (~android).any()
    assert np.array_equal(before.p_ctcvr.data[android], after.p_ctcvr.data[android])


def test_unknown_scene_rejected():
    arr = random_ranking_arrays(np.random.default_rng(3), 2)
    arr["scene"] = np.array([0, 5])
    with pytest.raises(ValueError):
        _dmr()(arr)


def test_batched_clicks_match_per_row():
    m = _dmr(4)
    arr = random_ranking_arrays(np.random.default_rng(4), 12)
    full = m(arr).p_ctcvr.data.ravel()
    for i in range(12):
        one = m({k: v[i:i + 1] for k, v in arr.items()}).p_ctcvr.data.ravel()
        np.testing.assert_allclose(one, full[i:i + 1], rtol=1e-12, atol=1e-15)


def test_rank_page_examples():
    assert rank_page([_item(0, 0.1), _item(1, 0.3), _item(2, 0.2)]) == [1, 2, 0]
    assert rank_page([_item(3, 0.2), _item(1, 0.2), _item(2, 0.2)]) == [1, 2, 3]
    assert rank_page([_item(0, 0.2, ctr=0.4), _item(1, 0.2, ctr=0.8)]) == [1, 0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=12, unique=True), st.randoms())
def test_rank_page_permutation_invariant(values, rnd):
    items = [_item(i, v) for i, v in enumerate(values)]
    shuffled = items[:]
    rnd.shuffle(shuffled)
    order = rank_page(items)
    assert order == rank_page(shuffled)
    assert sorted(order) == list(range(len(values)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 0.5), min_size=2, max_size=10), st.data())
def test_raising_score_never_lowers_rank(values, data):
    j = data.draw(st.integers(0, len(values) - 1))
    bump = data.draw(st.floats(0.0, 0.4))
    items = [_item(i, v) for i, v in enumerate(values)]
    before = rank_page(items).index(j)
    items[j] = _item(j, values[j] + bump)
    assert rank_page(items).index(j) <= before


def test_loss_examples():
    half = T.Tensor(np.array([0.5]))
    out = RankOutput(half, half, T.Tensor(np.array([0.25])))
    assert ranking_loss(out, [1], [1]).item() == pytest.approx(math.log(2) + math.log(4))
    perfect = RankOutput(T.Tensor(np.array([1.0, 0.0])), T.Tensor(np.array([1.0, 0.5])),
                         T.Tensor(np.array([1.0, 0.0])))
    assert ranking_loss(perfect, [1, 0], [1, 0]).item() < 1e-6
    with pytest.raises(ValueError):
        ranking_loss(out, [0], [1])


def test_cvr_gradient_vanishes_when_ctr_is_zero():
    a = T.parameter(np.array([-800.0]), "ctr_logit")
    b = T.parameter(np.array([0.3]), "cvr_logit")

    def loss():
        ctr, cvr = T.sigmoid(a), T.sigmoid(b)
        return ranking_loss(RankOutput(ctr, cvr, T.mul(ctr, cvr)), [0], [0])

    with T.Tape() as tape:
        g = T.backward(tape, loss())["cvr_logit"][0]
    eps = 1e-5
    b.data = np.array([0.3 + eps])
    up = loss().item()
    b.data = np.array([0.3 - eps])
    down = loss().item()
    assert abs(g) < 1e-12 and abs((up - down) / (2 * eps)) < 1e-12


def test_dmr_forward_returns_ordered_scored_items():
    m = _dmr(5)
    arr = random_ranking_arrays(np.random.default_rng(6), 5)
    items = dmr_forward(m, arr)
    assert [s.item_id for s in items] == list(arr["item"] - 1)
    assert all(s.rank_value == s.p_ctcvr for s in items)


def test_baseline_has_no_scene_experts():
    m = BaselineRanker(SMALL_VOCAB)
    assert not any("smmoe" in k for k in m.named_parameters())
    arr = random_ranking_arrays(np.random.default_rng(7), 8)
    a = m(arr).p_ctr.data
    arr["scene"] = 1 - arr["scene"]
    assert np.array_equal(a, m(arr).p_ctr.data)
