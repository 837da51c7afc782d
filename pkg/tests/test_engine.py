import numpy as np
import pytest

from edgesupply.encoders import Vocab
from edgesupply.features import DeviceState, emit_training_logs
from edgesupply.ranking import DMR
from edgesupply.sim.engine import Policy, World, run_sessions, summarize
from edgesupply.sim.protocol import InProcessTransport, ProtocolError, SocketTransport, serve_cloud
from edgesupply.sim.world import WorldConfig
from edgesupply.supply import SupplyConfig, SupplyModel

CFG = WorldConfig(n_items=300, n_categories=6)
SESSIONS = range(40)


@pytest.fixture(scope="module")
def world():
    return World.build(CFG)


@pytest.fixture(scope="module")
def models():
    vocab = Vocab.from_world(CFG)
    return DMR(vocab, seed=1), SupplyModel(vocab, seed=2)


def _ms(models, alpha, **kw):
    return Policy("mr+ms", models[0], models[1], SupplyConfig(alpha=alpha), **kw)


def test_policy_validation(models):
    with pytest.raises(ValueError):
        Policy("greedy")
    with pytest.raises(ValueError):
        Policy("mr")
    with pytest.raises(ValueError):
        Policy("mr+ms", models[0])


def test_mr_only_never_auto_pages(world, models):
    results = run_sessions(world, Policy("mr", models[0]), 0, SESSIONS)
    assert all(r.metrics.auto_requests == 0 for r in results)
    assert not any(ev.trigger == "auto" for r in results for ev in r.log.events if ev.kind == "page_request")


def test_alpha_zero_is_bit_identical_to_mr_only(world, models):
    mr = run_sessions(world, Policy("mr", models[0]), 3, SESSIONS)
    ms = run_sessions(world, _ms(models, 0.0), 3, SESSIONS)
    assert [r.log.to_json() for r in mr] == [r.log.to_json() for r in ms]
    assert [r.metrics for r in mr] == [r.metrics for r in ms]


def test_high_alpha_triggers_auto_pages_within_budget(world, models):
    results = run_sessions(world, _ms(models, 0.9), 0, SESSIONS)
    autos = [r.metrics.auto_requests for r in results]
    assert sum(autos) > 0
    assert max(autos) <= SupplyConfig().max_auto_pages
    assert all(row[-1] in (0, 1) for r in results for row in r.decisions)


def test_depth_counts_exposures(world, models):
    for r in run_sessions(world, _ms(models, 0.5), 1, SESSIONS):
        assert r.metrics.depth == sum(ev.kind == "expose" for ev in r.log.events)
        assert r.metrics.clicks == sum(ev.kind == "click" for ev in r.log.events)
        assert r.metrics.orders == sum(ev.kind == "purchase" for ev in r.log.events)


@pytest.mark.parametrize("capacity", [None, 1000])
def test_candidate_pool_conservation(world, models, capacity):
    policy = _ms(models, 0.5, pool_capacity=capacity)
    for r in run_sessions(world, policy, 2, SESSIONS):
        state = DeviceState(r.log.scene, CFG.page_size, CFG.click_seq_len, capacity, CFG.start_weekday)
        for ev in r.log.events:
            state.apply(ev)
            remaining = set(state.fetched) - set(state.exposed_all)
            assert len(state.pool) == len(set(state.pool))
            assert set(state.pool) | set(state.evicted) == remaining
            assert not set(state.pool) & set(state.evicted)
        if capacity:
            assert not state.evicted


def test_page_indices_strictly_increase(world, models):
    for r in run_sessions(world, _ms(models, 0.5), 4, SESSIONS):
        pages = [ev.page for ev in r.log.events if ev.kind == "page_request"]
        assert pages == sorted(set(pages))
        responses = [ev.page for ev in r.log.events if ev.kind == "page_response"]
        assert responses == pages


def test_runs_are_deterministic(world, models):
    a = run_sessions(world, _ms(models, 0.05), 5, SESSIONS)
    b = run_sessions(world, _ms(models, 0.05), 5, SESSIONS)
    assert [r.log.to_json() for r in a] == [r.log.to_json() for r in b]


def test_cohort_size_does_not_change_logs(world, models):
    a = run_sessions(world, _ms(models, 0.05), 6, SESSIONS, cohort_size=7)
    b = run_sessions(world, _ms(models, 0.05), 6, SESSIONS, cohort_size=1000)
    assert [r.log.to_json() for r in a] == [r.log.to_json() for r in b]


def test_logs_replay_into_samples(world):
    for r in run_sessions(world, Policy("logging"), 7, SESSIONS):
        supply, ranking = emit_training_logs(r.log, CFG.page_size, CFG.click_seq_len)
        assert len(ranking) == r.metrics.depth
        assert len(supply) == sum(ev.kind == "checkpoint" for ev in r.log.events)


def test_socket_and_wire_transports_match_in_process(world, models):
    policy = _ms(models, 0.2)
    direct = run_sessions(world, policy, 8, range(6))
    wire = run_sessions(world, policy, 8, range(6), transport_factory=lambda s: InProcessTransport(s, wire=True))
    tcp, _ = serve_cloud(__import__("edgesupply.sim.protocol", fromlist=["CloudServer"]).CloudServer(
        world.cfg, world.catalog, 8))
    try:
        sock = run_sessions(world, policy, 8, range(6),
                            transport_factory=lambda s: SocketTransport(*tcp.server_address))
    finally:
        tcp.shutdown()
        tcp.server_close()
    assert [r.log.to_json() for r in direct] == [r.log.to_json() for r in wire] == [r.log.to_json() for r in sock]


class _WrongPage:
    def __init__(self, server):
        self.inner = InProcessTransport(server)

    def request(self, msg):
        resp = self.inner.request(msg)
        return resp.__class__(resp.session, resp.page + 1, resp.items)

    def close(self):
        pass


def test_response_to_wrong_request_aborts(world):
    with pytest.raises(ProtocolError):
        run_sessions(world, Policy("logging"), 0, range(2), transport_factory=_WrongPage)


def test_summary_fields(world):
    s = summarize(run_sessions(world, Policy("logging"), 0, SESSIONS))
    assert s["sessions"] == len(SESSIONS)
    assert s["auto_requests"] == 0
    assert s["manual_requests"] >= 1
    assert np.isfinite(s["orders_per_session"])
