"""Session engine: device, user and cloud stepping through one visit.

Each session is a generator that yields model requests and receives the
answers, so a cohort of sessions can be advanced in lockstep and every model
call is batched across sessions. Every checkpoint yields a ``supply`` request
(``None`` payload when the policy has no supply model) followed by a
``rank`` request, so two policies that take the same decisions issue
identically composed batches and produce bit-identical logs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..features import (DeviceState, FeatureBundle, RealTimeEvent, SessionLog, ranking_arrays,
                        supply_arrays)
from ..layers import Module
from ..ranking import RankOutput, ScoredItem, rank_page, scored_items
from ..supply import SupplyConfig, SupplyModel, should_page
from .protocol import CloudServer, InProcessTransport, PagingRequest, ProtocolError
from .world import Catalog, LatentUser, WorldConfig, best_remaining_appeal, make_user, react, world_catalog

POLICIES = ("logging", "mr", "mr+ms")


@dataclass
class World:
    cfg: WorldConfig
    catalog: Catalog

    @classmethod
    def build(cls, cfg: WorldConfig) -> "World":
        cfg.validate()
        return cls(cfg, world_catalog(cfg))

    def user(self, run_seed: int, user_id: int) -> LatentUser:
        return make_user(self.cfg, self.catalog, run_seed, user_id)


@dataclass
class Policy:
    """``logging``: server order, manual paging only. ``mr``: mobile ranking.
    ``mr+ms``: mobile ranking plus Mobile Supply auto-paging.

    ``manual_paging=False`` disables manual page requests after the first page.
    """
    name: str
    ranker: Module | None = None
    supply: SupplyModel | None = None
    supply_cfg: SupplyConfig = field(default_factory=SupplyConfig)
    manual_paging: bool = True
    pool_capacity: int | None = None

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"unknown policy {self.name!r}")
        if self.name in ("mr", "mr+ms") and self.ranker is None:
            raise ValueError(f"policy {self.name} needs a ranker")
        if self.name == "mr+ms" and self.supply is None:
            raise ValueError("policy mr+ms needs a supply model")
        if self.name != "mr+ms":
            self.supply = None


@dataclass
class SessionMetrics:
    clicks: int = 0
    orders: int = 0
    depth: int = 0
    manual_requests: int = 0
    auto_requests: int = 0
    duration: float = 0.0
    exit_reason: str = ""

    @property
    def requests(self) -> int:
        return self.manual_requests + self.auto_requests


@dataclass
class SessionResult:
    log: SessionLog
    metrics: SessionMetrics
    exposures: list[tuple[float, float, int, int]]    # (p_ctr, p_ctcvr, click, purchase)
    decisions: list[tuple] = field(default_factory=list)
    score_rows: list[tuple] = field(default_factory=list)


@dataclass
class RankRequest:
    bundles: list[FeatureBundle]


class _Session:
    def __init__(self, world: World, user: LatentUser, policy: Policy, transport, session_id: int,
                 record_scores: bool = False):
        cfg = world.cfg
        self.cfg, self.catalog, self.user, self.policy = cfg, world.catalog, user, policy
        self.transport = transport
        self.sid = session_id
        self.record_scores = record_scores
        self.state = DeviceState(user.scene, cfg.page_size, cfg.click_seq_len, policy.pool_capacity,
                                 cfg.start_weekday)
        self.log = SessionLog(session_id, user.user_id, user.scene, user.start_time)
        self.metrics = SessionMetrics()
        self.t = user.start_time
        self.patience = user.patience
        self.done = False
        self.scores: dict[int, ScoredItem] = {}
        self.exposures: list[tuple[float, float, int, int]] = []
        self.decisions: list[tuple] = []
        self.score_rows: list[tuple] = []
        self.manual_intents = 0

    def emit(self, ev: RealTimeEvent) -> None:
        self.log.append(ev)
        self.state.apply(ev)

    def exit(self, reason: str) -> None:
        self.emit(RealTimeEvent("exit", self.t))
        self.metrics.exit_reason = reason
        self.metrics.duration = self.t - self.user.start_time
        self.done = True

    def fetch(self, trigger: str) -> bool:
        page = self.state.page_index + 1
        self.emit(RealTimeEvent("page_request", self.t, page=page, trigger=trigger))
        resp = self.transport.request(PagingRequest(self.sid, page, trigger, self.t))
        if resp.page != page or resp.session != self.sid:
            raise ProtocolError(f"session {self.sid}: response for page {resp.page}, expected {page}")
        if trigger == "auto":
            self.metrics.auto_requests += 1
        else:
            self.metrics.manual_requests += 1
        self.t += self.cfg.fetch_seconds
        self.emit(RealTimeEvent("page_response", self.t, page=page, items=list(resp.items)))
        return bool(resp.items)

    def user_step(self) -> list[RealTimeEvent]:
        """Expose the head of the pool and apply the user's reaction."""
        cfg, state = self.cfg, self.state
        item = state.pool[0]
        pos = state.views_on_page
        start = len(self.log.events)
        self.emit(RealTimeEvent("expose", self.t, item=item, pos=pos, page=state.page_index))
        r = react(cfg, self.catalog, self.user, item, pos)
        self.t += cfg.view_seconds
        self.patience -= 1.0
        self.metrics.depth += 1
        if r.clicked:
            self.emit(RealTimeEvent("click", self.t, item=item, pos=pos, page=state.page_index, stay=r.stay))
            self.t += r.stay
            self.patience += cfg.click_refill
            self.metrics.clicks += 1
        if r.purchased:
            self.emit(RealTimeEvent("purchase", self.t, item=item, pos=pos, page=state.page_index))
            self.patience += cfg.purchase_refill
            self.metrics.orders += 1
        s = self.scores.get(item)
        if s is not None:
            self.exposures.append((s.p_ctr, s.p_ctcvr, int(r.clicked), int(r.purchased)))
        if self.patience <= 0:
            self.exit("patience")
        return self.log.events[start:]

    def rank(self):
        if self.policy.ranker is None or not self.state.pool:
            return
        pool = list(self.state.pool)
        scored = yield ("rank", RankRequest([self.state.collect_bundle(i) for i in pool]))
        for s in scored:
            self.scores[s.item_id] = s
        order = rank_page(scored)
        if self.record_scores:
            for r, iid in enumerate(order):
                s = self.scores[iid]
                self.score_rows.append((self.sid, iid, self.user.scene.name, s.p_ctr, s.p_cvr, s.p_ctcvr, r))
        if order != pool:
            self.emit(RealTimeEvent("rerank", self.t, items=order))

    def wants_manual(self) -> bool:
        pool = self.state.pool
        return not pool or best_remaining_appeal(self.catalog, self.user, pool) < self.cfg.manual_threshold

    def manual_intent(self):
        cfg = self.cfg
        if not self.policy.manual_paging:
            if not self.state.pool:
                self.exit("exhausted")
                return False
            return True
        k = self.manual_intents
        self.manual_intents += 1
        if self.user.u_quit[k % len(self.user.u_quit)] < cfg.manual_quit_prob:
            self.exit("disappointed")
            return False
        self.patience -= cfg.manual_penalty
        if self.patience <= 0:
            self.exit("patience")
            return False
        if not self.fetch("manual"):
            self.exit("catalog")
            return False
        yield from self.rank()
        return True

    def run(self):
        every = self.policy.supply_cfg.checkpoint_every
        if not self.fetch("manual"):
            self.exit("catalog")
            return
        yield from self.rank()
        while not self.done:
            if not self.state.pool:
                if not (yield from self.manual_intent()):
                    break
                continue
            self.user_step()
            if self.done:
                break
            if self.state.views_on_page % every == 0:
                self.emit(RealTimeEvent("checkpoint", self.t, pos=self.state.p_cv, page=self.state.page_index))
                payload = self.state.supply_input() if self.policy.supply is not None else None
                est = yield ("supply", payload)
                if est is not None:
                    v_l, v_g, u_p = est
                    decision = should_page(u_p, self.policy.supply_cfg, self.state.auto_pages)
                    self.decisions.append((self.sid, self.state.page_index, self.state.p_cv, v_l, v_g, u_p,
                                           self.policy.supply_cfg.alpha, int(decision)))
                    if decision and not self.fetch("auto"):
                        self.exit("catalog")
                        break
                yield from self.rank()
            if self.wants_manual():
                if not (yield from self.manual_intent()):
                    break
        if not self.done:
            self.exit("end")

    def result(self) -> SessionResult:
        return SessionResult(self.log, self.metrics, self.exposures, self.decisions, self.score_rows)


# -- batched evaluation ---------------------------------------------------------

def _grouped_rank_arrays(requests: Sequence[RankRequest], click_seq_len: int) -> dict[str, np.ndarray]:
    """Item rows for every request; click sequences stored once per request."""
    rows = [b for r in requests for b in r.bundles]
    arr = ranking_arrays(rows, click_seq_len)
    heads = ranking_arrays([r.bundles[0] for r in requests], click_seq_len)
    for k in ("click_item", "click_cate", "click_stay", "click_mask"):
        arr[k] = heads[k]
    arr["click_group"] = np.repeat(np.arange(len(requests)), [len(r.bundles) for r in requests])
    return arr


def _answer_rank(ranker: Module, requests: Sequence[RankRequest], click_seq_len: int) -> list[list[ScoredItem]]:
    arr = _grouped_rank_arrays(requests, click_seq_len)
    out: RankOutput = ranker(arr)
    scored = scored_items(arr["item"] - 1, out)
    answers, pos = [], 0
    for r in requests:
        answers.append(scored[pos:pos + len(r.bundles)])
        pos += len(r.bundles)
    return answers


def _answer_supply(model: SupplyModel, inputs, cfg: WorldConfig) -> list[tuple[float, float, float]]:
    est = model(supply_arrays(inputs, cfg.page_size, cfg.click_seq_len))
    return est.rows()


def _drive(sessions: list[_Session], policy: Policy, cfg: WorldConfig) -> None:
    gens = [s.run() for s in sessions]
    pending: dict[int, tuple] = {}
    for i, g in enumerate(gens):
        try:
            pending[i] = next(g)
        except StopIteration:
            pass
    while pending:
        idxs = sorted(pending)
        replies: dict[int, object] = dict.fromkeys(idxs)
        sup = [i for i in idxs if pending[i][0] == "supply" and pending[i][1] is not None]
        if sup:
            for i, est in zip(sup, _answer_supply(policy.supply, [pending[i][1] for i in sup], cfg)):
                replies[i] = est
        rk = [i for i in idxs if pending[i][0] == "rank"]
        if rk:
            for i, ans in zip(rk, _answer_rank(policy.ranker, [pending[i][1] for i in rk], cfg.click_seq_len)):
                replies[i] = ans
        for i in idxs:
            try:
                pending[i] = gens[i].send(replies[i])
            except StopIteration:
                del pending[i]


def run_sessions(world: World, policy: Policy, run_seed: int, session_ids: Iterable[int],
                 cohort_size: int = 1000, record_scores: bool = False,
                 transport_factory: Callable[[CloudServer], object] | None = None) -> list[SessionResult]:
    """Simulate sessions in fixed cohorts (by position in ``session_ids``)."""
    ids = list(session_ids)
    server = CloudServer(world.cfg, world.catalog, run_seed)
    transport = transport_factory(server) if transport_factory else InProcessTransport(server)
    results: list[SessionResult] = []
    try:
        for start in range(0, len(ids), cohort_size):
            sessions = []
            for sid in ids[start:start + cohort_size]:
                user = world.user(run_seed, sid)
                if transport_factory is None:
                    server.open_session(sid, user)
                sessions.append(_Session(world, user, policy, transport, sid, record_scores))
            _drive(sessions, policy, world.cfg)
            results.extend(s.result() for s in sessions)
    finally:
        transport.close()
    return results


def run_session(world: World, policy: Policy, seed: int, session_id: int = 0, **kw) -> SessionResult:
    return run_sessions(world, policy, seed, [session_id], **kw)[0]


def user_step(world: World, user: LatentUser, state: DeviceState, t: float = 0.0) -> list[RealTimeEvent]:
    """One view of the head of ``state.pool`` by ``user`` (no paging logic)."""
    sess = _Session.__new__(_Session)
    sess.cfg, sess.catalog, sess.user = world.cfg, world.catalog, user
    sess.state = state
    sess.log = SessionLog(-1, user.user_id, user.scene, t)
    sess.metrics = SessionMetrics()
    sess.t, sess.patience, sess.done = t, float("inf"), False
    sess.scores, sess.exposures = {}, []
    return sess.user_step()


def summarize(results: Sequence[SessionResult]) -> dict[str, float]:
    n = max(len(results), 1)
    m = [r.metrics for r in results]
    return {
        "sessions": len(results),
        "orders_per_session": sum(x.orders for x in m) / n,
        "clicks_per_session": sum(x.clicks for x in m) / n,
        "depth": sum(x.depth for x in m) / n,
        "manual_requests": sum(x.manual_requests for x in m) / n,
        "auto_requests": sum(x.auto_requests for x in m) / n,
    }
