"""Edge-side feature collection and training-sample emission.

Features come from three sources: the item (id, category, stats vector), the
server (predicted CTR/CVR shipped with the page) and the device (click
sequence, stay times, exposure position, feedback counters, time bucket).
The same :class:`DeviceState` drives live scoring in the simulator and the
offline replay that turns a session log into samples, so training and serving
features cannot drift apart.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layers import DeviceScene

STAY_MAX_SECONDS = 600.0
N_DEVICE_SCALARS = 6
N_INFO = 4
SAMPLE_SCHEMA_VERSION = 1

EVENT_KINDS = ("expose", "click", "purchase", "page_request", "page_response", "rerank", "checkpoint", "exit")


class FeatureError(ValueError):
    pass


class CorruptLogError(ValueError):
    pass


@dataclass(frozen=True)
class ItemFeatures:
    item_id: int
    category: int
    info: tuple[float, ...]
    p_ctr: float
    p_cvr: float

    def __post_init__(self):
        if not (0.0 <= self.p_ctr <= 1.0 and 0.0 <= self.p_cvr <= 1.0):
            raise FeatureError(f"server scores out of [0,1] for item {self.item_id}")
        if len(self.info) != N_INFO or not all(math.isfinite(v) for v in self.info):
            raise FeatureError(f"bad stats vector for item {self.item_id}")

    def to_list(self) -> list:
        return [self.item_id, self.category, list(self.info), self.p_ctr, self.p_cvr]

    @classmethod
    def from_list(cls, row: Sequence) -> "ItemFeatures":
        return cls(int(row[0]), int(row[1]), tuple(float(v) for v in row[2]), float(row[3]), float(row[4]))


def time_bucket(t: float, start_weekday: int = 0) -> tuple[int, int]:
    """``(weekday, hour)`` for a simulated clock in seconds."""
    day = int(t // 86400.0)
    hour = int((t % 86400.0) // 3600.0)
    return (start_weekday + day) % 7, hour


def stay_norm(seconds: float) -> float:
    """Log-scaled stay time min-max normalized to [0, 1]."""
    if seconds < 0:
        raise FeatureError("stay time must be non-negative")
    return min(1.0, math.log1p(seconds) / math.log1p(STAY_MAX_SECONDS))


@dataclass
class RealTimeEvent:
    kind: str
    t: float
    item: int = -1
    pos: int = -1
    page: int = -1
    stay: float = 0.0
    trigger: str = ""
    items: list | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise FeatureError(f"unknown event kind {self.kind!r}")
        if self.stay < 0 or (self.kind == "expose" and self.pos < 0):
            raise FeatureError("stay time and position must be non-negative")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "t": self.t}
        if self.item >= 0:
            d["item"] = self.item
        if self.pos >= 0:
            d["pos"] = self.pos
        if self.page >= 0:
            d["page"] = self.page
        if self.stay:
            d["stay"] = self.stay
        if self.trigger:
            d["trigger"] = self.trigger
        if self.items is not None:
            d["items"] = [x.to_list() if isinstance(x, ItemFeatures) else x for x in self.items]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RealTimeEvent":
        items = d.get("items")
        if items is not None and d["kind"] == "page_response":
            items = [ItemFeatures.from_list(x) for x in items]
        return cls(d["kind"], float(d["t"]), int(d.get("item", -1)), int(d.get("pos", -1)),
                   int(d.get("page", -1)), float(d.get("stay", 0.0)), d.get("trigger", ""), items)


@dataclass
class SessionLog:
    session_id: int
    user_id: int
    scene: DeviceScene
    start_time: float
    events: list[RealTimeEvent] = field(default_factory=list)

    def append(self, event: RealTimeEvent) -> None:
        if self.events and event.t < self.events[-1].t:
            raise FeatureError("events must be time-ordered")
        self.events.append(event)

    def to_json(self) -> str:
        return json.dumps({"session_id": self.session_id, "user_id": self.user_id,
                           "scene": self.scene.name, "start_time": self.start_time,
                           "events": [e.to_dict() for e in self.events]},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SessionLog":
        d = json.loads(line)
        log = cls(d["session_id"], d["user_id"], DeviceScene[d["scene"]], d["start_time"])
        log.events = [RealTimeEvent.from_dict(e) for e in d["events"]]
        return log


@dataclass(frozen=True)
class FeatureBundle:
    """Model input for one decision point."""
    item: ItemFeatures
    device: tuple[float, ...]
    hour: int
    weekday: int
    clicks: tuple[tuple[int, int, float], ...]   # (item id, category, normalized stay)
    p_cv: int
    scene: DeviceScene


@dataclass(frozen=True)
class SupplyInput:
    page: tuple[ItemFeatures, ...]
    window: int
    device: tuple[float, ...]
    hour: int
    weekday: int
    clicks: tuple[tuple[int, int, float], ...]
    p_cv: int
    scene: DeviceScene


class DeviceState:
    """Everything the phone knows during one session.

    ``pool`` is the unexposed candidate list in display order. A page arrival
    puts the new items in front of the pool and truncates it to
    ``pool_capacity``; truncated items are recorded in ``evicted``.
    """

    def __init__(self, scene, page_size: int = 20, click_seq_len: int = 10,
                 pool_capacity: int | None = None, start_weekday: int = 0):
        self.scene = DeviceScene.parse(scene)
        self.page_size = page_size
        self.pool_capacity = pool_capacity or page_size
        self.start_weekday = start_weekday
        self.clicks: deque[tuple[int, int, float]] = deque(maxlen=click_seq_len)
        self.known: dict[int, ItemFeatures] = {}
        self.fetched: list[int] = []
        self.pool: list[int] = []
        self.evicted: list[int] = []
        self.exposed_all: list[int] = []
        self.page_index = -1
        self.page_items: list[int] = []
        self._page_set: set[int] = set()
        self.exposed_on_page: list[int] = []
        self.views_on_page = 0
        self.views = 0
        self.clicks_on_page = 0
        self.purchases = 0
        self.last_stay = 0.0
        self.t = 0.0
        self.auto_pages = 0
        self.manual_pages = 0
        self._pending_request: int | None = None

    # -- event application -------------------------------------------------

    def apply(self, ev: RealTimeEvent) -> None:
        self.t = ev.t
        handler = getattr(self, f"_on_{ev.kind}")
        handler(ev)

    def _on_page_request(self, ev):
        if self._pending_request is not None:
            raise CorruptLogError("paging request while another is outstanding")
        if ev.page <= self.page_index:
            raise CorruptLogError(f"page index {ev.page} not increasing (last {self.page_index})")
        self._pending_request = ev.page
        if ev.trigger == "auto":
            self.auto_pages += 1
        else:
            self.manual_pages += 1

    def _on_page_response(self, ev):
        if self._pending_request != ev.page:
            raise CorruptLogError(f"response for page {ev.page} without matching request")
        self._pending_request = None
        items = list(ev.items or [])
        for it in items:
            if it.item_id in self.known:
                raise CorruptLogError(f"item {it.item_id} delivered twice")
            self.known[it.item_id] = it
        ids = [it.item_id for it in items]
        self.fetched.extend(ids)
        merged = ids + self.pool
        self.pool = merged[:self.pool_capacity]
        self.evicted.extend(merged[self.pool_capacity:])
        self.page_index = ev.page
        self.page_items = ids
        self._page_set = set(ids)
        self.exposed_on_page = []
        self.views_on_page = 0
        self.clicks_on_page = 0

    def _on_rerank(self, ev):
        order = [int(i) for i in ev.items]
        if sorted(order) != sorted(self.pool):
            raise CorruptLogError("rerank is not a permutation of the candidate pool")
        self.pool = order

    def _on_expose(self, ev):
        if not self.pool or self.pool[0] != ev.item:
            raise CorruptLogError(f"exposed item {ev.item} is not the head of the pool")
        self.pool.pop(0)
        self.views_on_page += 1
        # leftovers from earlier pages can still be shown; they are not part of this page
        if ev.item in self._page_set:
            self.exposed_on_page.append(ev.item)
        self.exposed_all.append(ev.item)
        self.views += 1

    def _on_click(self, ev):
        if not self.exposed_all or self.exposed_all[-1] != ev.item:
            raise CorruptLogError(f"click on {ev.item} which is not the last exposure")
        self.clicks.append((ev.item, self.known[ev.item].category, stay_norm(ev.stay)))
        self.clicks_on_page += 1
        self.last_stay = ev.stay

    def _on_purchase(self, ev):
        if not self.clicks or self.clicks[-1][0] != ev.item:
            raise CorruptLogError(f"purchase of {ev.item} without a click")
        self.purchases += 1

    def _on_checkpoint(self, ev):
        pass

    def _on_exit(self, ev):
        pass

    # -- feature collection ------------------------------------------------

    @property
    def p_cv(self) -> int:
        return max(len(self.exposed_on_page) - 1, 0)

    def device_scalars(self) -> tuple[float, ...]:
        return (self.p_cv / self.page_size, max(self.page_index, 0) / 5.0, self.views / 50.0,
                self.clicks_on_page / 5.0, self.purchases / 3.0, stay_norm(self.last_stay))

    def page_snapshot(self) -> list[int]:
        """Current page in display order: exposed prefix, then unexposed."""
        return list(self.exposed_on_page) + [i for i in self.pool if i in self._page_set]

    def collect_bundle(self, target: int) -> FeatureBundle:
        if target not in self.known or (target not in self.pool and target not in self.page_items):
            raise FeatureError(f"item {target} is not on the device's current list")
        weekday, hour = time_bucket(self.t, self.start_weekday)
        return FeatureBundle(self.known[target], self.device_scalars(), hour, weekday,
                             tuple(self.clicks), self.p_cv, self.scene)

    def supply_input(self) -> SupplyInput:
        if not self.page_items:
            raise FeatureError("no page on the device")
        weekday, hour = time_bucket(self.t, self.start_weekday)
        page = tuple(self.known[i] for i in self.page_snapshot())
        return SupplyInput(page, len(self.exposed_on_page), self.device_scalars(), hour, weekday,
                           tuple(self.clicks), self.p_cv, self.scene)


def collect_bundle(state: DeviceState, target: int) -> FeatureBundle:
    return state.collect_bundle(target)


# -- dense encodings ----------------------------------------------------------
#
# Item block:   [item emb | category emb | v_info (4) | p_ctr | p_cvr]
# Device block: [device scalars (6) | hour emb | weekday emb]
# Click step:   [item emb | category emb | normalized stay]
# encode_bundle concatenates item block, device block and the mean click-item
# embedding (the pooled-click slot; zeros when there are no clicks).

def _click_arrays(click_lists: Sequence[Sequence[tuple[int, int, float]]], n: int):
    B = len(click_lists)
    ids = np.zeros((B, n), dtype=np.int64)
    cates = np.zeros((B, n), dtype=np.int64)
    stay = np.zeros((B, n))
    mask = np.zeros((B, n))
    for b, clicks in enumerate(click_lists):
        for t, (i, c, s) in enumerate(list(clicks)[-n:]):
            ids[b, t] = i + 1
            cates[b, t] = c + 1
            stay[b, t] = s
            mask[b, t] = 1.0
    return ids, cates, stay, mask


def _item_arrays(items: Sequence[ItemFeatures]):
    ids = np.fromiter((it.item_id + 1 for it in items), dtype=np.int64, count=len(items))
    cates = np.fromiter((it.category + 1 for it in items), dtype=np.int64, count=len(items))
    dense = np.array([[*it.info, it.p_ctr, it.p_cvr] for it in items], dtype=np.float64).reshape(len(items), N_INFO + 2)
    return ids, cates, dense


def ranking_arrays(bundles: Sequence[FeatureBundle], click_seq_len: int = 10) -> dict[str, np.ndarray]:
    """Columnar arrays for a batch of bundles. Ids are shifted by one; 0 is reserved."""
    ids, cates, dense = _item_arrays([b.item for b in bundles])
    c_ids, c_cates, c_stay, c_mask = _click_arrays([b.clicks for b in bundles], click_seq_len)
    return {
        "item": ids, "cate": cates, "item_dense": dense,
        "device": np.array([b.device for b in bundles], dtype=np.float64).reshape(len(bundles), N_DEVICE_SCALARS),
        "hour": np.array([b.hour for b in bundles], dtype=np.int64),
        "weekday": np.array([b.weekday for b in bundles], dtype=np.int64),
        "click_item": c_ids, "click_cate": c_cates, "click_stay": c_stay, "click_mask": c_mask,
        "scene": np.array([int(b.scene) for b in bundles], dtype=np.int64),
    }


def supply_arrays(inputs: Sequence[SupplyInput], page_size: int = 20, click_seq_len: int = 10) -> dict[str, np.ndarray]:
    B = len(inputs)
    page_item = np.zeros((B, page_size), dtype=np.int64)
    page_cate = np.zeros((B, page_size), dtype=np.int64)
    page_dense = np.zeros((B, page_size, N_INFO + 3))
    page_mask = np.zeros((B, page_size))
    for b, inp in enumerate(inputs):
        page = inp.page[:page_size]
        if not page:
            raise FeatureError("empty page in supply input")
        ids, cates, dense = _item_arrays(page)
        n = len(page)
        page_item[b, :n] = ids
        page_cate[b, :n] = cates
        page_dense[b, :n, :N_INFO + 2] = dense
        page_dense[b, :min(inp.window, n), N_INFO + 2] = 1.0
        page_mask[b, :n] = 1.0
    c_ids, c_cates, c_stay, c_mask = _click_arrays([x.clicks for x in inputs], click_seq_len)
    return {
        "page_item": page_item, "page_cate": page_cate, "page_dense": page_dense, "page_mask": page_mask,
        "device": np.array([x.device for x in inputs], dtype=np.float64).reshape(B, N_DEVICE_SCALARS),
        "hour": np.array([x.hour for x in inputs], dtype=np.int64),
        "weekday": np.array([x.weekday for x in inputs], dtype=np.int64),
        "p_cv": np.array([x.p_cv for x in inputs], dtype=np.int64),
        "click_item": c_ids, "click_cate": c_cates, "click_stay": c_stay, "click_mask": c_mask,
        "scene": np.array([int(x.scene) for x in inputs], dtype=np.int64),
    }


def concat_arrays(parts: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in parts[0]}


def take_rows(arrays: dict[str, np.ndarray], idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in arrays.items()}


def encode_bundle(bundle: FeatureBundle, tables) -> np.ndarray:
    """Flat vector for one bundle using ``tables`` (an :class:`EmbeddingTables`)."""
    arr = ranking_arrays([bundle], max(len(bundle.clicks), 1))
    return tables.encode(arr).data[0]


def bundle_layout(emb_dim: int) -> dict[str, tuple[int, int]]:
    """Offsets of each slot in :func:`encode_bundle` output."""
    sizes = [("item_emb", emb_dim), ("cate_emb", emb_dim), ("v_info", N_INFO), ("p_ctr", 1), ("p_cvr", 1),
             ("device", N_DEVICE_SCALARS), ("hour_emb", emb_dim), ("weekday_emb", emb_dim), ("clicks", emb_dim)]
    out, pos = {}, 0
    for name, n in sizes:
        out[name] = (pos, pos + n)
        pos += n
    return out


# -- labels and samples -------------------------------------------------------

OBJECTIVES = ("special", "general")


def make_supply_labels(page_len: int, exposed_positions: Iterable[int], order_positions: Iterable[int],
                       objective: str = "special") -> tuple[int, int]:
    """``(V_l, V_g)``: orders inside the exposed prefix and on the whole page.

    The special objective reduces each count to "at least one order".
    """
    if objective not in OBJECTIVES:
        raise FeatureError(f"unknown objective {objective!r}")
    exposed = sorted(set(exposed_positions))
    if exposed != list(range(len(exposed))) or len(exposed) > page_len:
        raise FeatureError("exposed window must be a prefix of the page")
    orders = [p for p in order_positions if 0 <= p < page_len]
    v_g = len(orders)
    v_l = sum(1 for p in orders if p < len(exposed))
    if objective == "special":
        v_l, v_g = min(v_l, 1), min(v_g, 1)
    return v_l, v_g


@dataclass(frozen=True)
class RankingSample:
    session_id: int
    user_id: int
    bundle: FeatureBundle
    click: int
    ctcvr: int

    def to_dict(self) -> dict:
        b = self.bundle
        return {"session_id": self.session_id, "user_id": self.user_id, "item": b.item.to_list(),
                "device": list(b.device), "hour": b.hour, "weekday": b.weekday,
                "clicks": [list(c) for c in b.clicks], "p_cv": b.p_cv, "scene": b.scene.name,
                "click": self.click, "ctcvr": self.ctcvr}

    @classmethod
    def from_dict(cls, d: dict) -> "RankingSample":
        bundle = FeatureBundle(ItemFeatures.from_list(d["item"]), tuple(d["device"]), d["hour"], d["weekday"],
                               tuple((int(a), int(b), float(c)) for a, b, c in d["clicks"]), d["p_cv"],
                               DeviceScene[d["scene"]])
        return cls(d["session_id"], d["user_id"], bundle, d["click"], d["ctcvr"])


@dataclass(frozen=True)
class SupplySample:
    session_id: int
    user_id: int
    page_index: int
    inp: SupplyInput
    v_l: int
    v_g: int

    def to_dict(self) -> dict:
        x = self.inp
        return {"session_id": self.session_id, "user_id": self.user_id, "page_index": self.page_index,
                "page": [it.to_list() for it in x.page], "window": x.window, "device": list(x.device),
                "hour": x.hour, "weekday": x.weekday, "clicks": [list(c) for c in x.clicks],
                "p_cv": x.p_cv, "scene": x.scene.name, "v_l": self.v_l, "v_g": self.v_g}

    @classmethod
    def from_dict(cls, d: dict) -> "SupplySample":
        inp = SupplyInput(tuple(ItemFeatures.from_list(r) for r in d["page"]), d["window"], tuple(d["device"]),
                          d["hour"], d["weekday"], tuple((int(a), int(b), float(c)) for a, b, c in d["clicks"]),
                          d["p_cv"], DeviceScene[d["scene"]])
        return cls(d["session_id"], d["user_id"], d["page_index"], inp, d["v_l"], d["v_g"])


def emit_training_logs(log: SessionLog, page_size: int = 20, click_seq_len: int = 10,
                       objective: str = "special", label_freeze: str = "page_exit",
                       start_weekday: int = 0) -> tuple[list[SupplySample], list[RankingSample]]:
    """Replay a finished session into supply and ranking samples.

    ``label_freeze="page_exit"`` counts every order the page eventually
    received; ``"next_checkpoint"`` only those placed before the next
    checkpoint on the same page.
    """
    if label_freeze not in ("page_exit", "next_checkpoint"):
        raise FeatureError(f"unknown label_freeze {label_freeze!r}")
    state = DeviceState(log.scene, page_size, click_seq_len, start_weekday=start_weekday)
    ranking: list[list] = []        # [bundle, click, ctcvr]
    checkpoints: list[tuple[int, int, SupplyInput, list[int]]] = []   # (event idx, page, input, window ids)
    purchases: list[tuple[int, int, int]] = []                        # (event idx, page, item)
    page_members: dict[int, list[int]] = {}
    for idx, ev in enumerate(log.events):
        if ev.kind == "expose":
            ranking.append([state.collect_bundle(ev.item), 0, 0])
        elif ev.kind == "click":
            if not ranking or ranking[-1][0].item.item_id != ev.item:
                raise CorruptLogError(f"click on {ev.item} does not follow its exposure")
            ranking[-1][1] = 1
        elif ev.kind == "purchase":
            if not ranking or ranking[-1][0].item.item_id != ev.item or ranking[-1][1] != 1:
                raise CorruptLogError(f"purchase of {ev.item} without a click")
            ranking[-1][2] = 1
            purchases.append((idx, state.page_index, ev.item))
        elif ev.kind == "checkpoint":
            checkpoints.append((idx, state.page_index, state.supply_input(), list(state.exposed_on_page)))
        state.apply(ev)
        if ev.kind == "page_response":
            page_members[ev.page] = list(state.page_items)

    supply = []
    for n, (idx, page, inp, window_ids) in enumerate(checkpoints):
        horizon = math.inf
        if label_freeze == "next_checkpoint":
            later = [c[0] for c in checkpoints[n + 1:] if c[1] == page]
            horizon = later[0] if later else math.inf
        members = set(page_members.get(page, ()))
        ordered = {item for (pidx, ppage, item) in purchases if ppage == page and item in members and pidx < horizon}
        snapshot = [it.item_id for it in inp.page]
        positions = [snapshot.index(i) for i in ordered if i in snapshot]
        exposed_positions = range(len(window_ids))
        v_l, v_g = make_supply_labels(len(snapshot), exposed_positions, positions, objective)
        if v_g < v_l:
            raise CorruptLogError("global value below local value")
        supply.append(SupplySample(log.session_id, log.user_id, page, inp, v_l, v_g))

    rank_samples = []
    for bundle, click, ctcvr in ranking:
        if ctcvr > click:
            raise CorruptLogError("purchase without click")
        rank_samples.append(RankingSample(log.session_id, log.user_id, bundle, click, ctcvr))
    return supply, rank_samples


# -- sample files ---------------------------------------------------------------

def write_samples(path: str | Path, kind: str, samples: Sequence) -> None:
    """Newline-delimited JSON with a schema header line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"schema": f"edgesupply.{kind}_sample", "version": SAMPLE_SCHEMA_VERSION},
                            sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_samples(path: str | Path) -> tuple[str, list]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("version") != SAMPLE_SCHEMA_VERSION:
            raise FeatureError(f"unsupported sample schema version {header.get('version')}")
        schema = header.get("schema", "")
        if schema == "edgesupply.supply_sample":
            cls, kind = SupplySample, "supply"
        elif schema == "edgesupply.ranking_sample":
            cls, kind = RankingSample, "ranking"
        else:
            raise FeatureError(f"unknown sample schema {schema!r}")
        return kind, [cls.from_dict(json.loads(line)) for line in fh if line.strip()]


RANKING_CSV_COLUMNS = ["session_id", "user_id", "item_id", "category", "info0", "info1", "info2", "info3",
                       "p_ctr", "p_cvr", "p_cv", "dev0", "dev1", "dev2", "dev3", "dev4", "dev5",
                       "hour", "weekday", "scene", "n_clicks", "click_items", "click", "ctcvr"]
SUPPLY_CSV_COLUMNS = ["session_id", "user_id", "page_index", "p_cv", "window", "page_len", "page_items",
                      "scene", "v_l", "v_g"]


def samples_to_csv(kind: str, samples: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if kind == "ranking":
        w.writerow(RANKING_CSV_COLUMNS)
        for s in samples:
            b = s.bundle
            w.writerow([s.session_id, s.user_id, b.item.item_id, b.item.category, *b.item.info,
                        b.item.p_ctr, b.item.p_cvr, b.p_cv, *b.device, b.hour, b.weekday, b.scene.name,
                        len(b.clicks), "|".join(str(c[0]) for c in b.clicks), s.click, s.ctcvr])
    elif kind == "supply":
        w.writerow(SUPPLY_CSV_COLUMNS)
        for s in samples:
            w.writerow([s.session_id, s.user_id, s.page_index, s.inp.p_cv, s.inp.window, len(s.inp.page),
                        "|".join(str(it.item_id) for it in s.inp.page), s.inp.scene.name, s.v_l, s.v_g])
    else:
        raise FeatureError(f"unknown sample kind {kind!r}")
    return buf.getvalue()
