"""Synthetic catalog, latent-preference users and the behavior model."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..layers import DeviceScene


@dataclass(frozen=True)
class BehaviorPreset:
    """Per-scene click/purchase constants.

    click    ~ sigmoid(click_base + click_affinity * u.q + pop - position_bias * log1p(pos))
    purchase ~ sigmoid(buy_base + buy_affinity * u.q)        (given a click)
    """
    click_base: float
    click_affinity: float
    buy_base: float
    buy_affinity: float
    drift: float


ANDROID_PRESET = BehaviorPreset(click_base=-3.85, click_affinity=3.6, buy_base=-4.15, buy_affinity=2.8, drift=0.3)
IOS_PRESET = BehaviorPreset(click_base=-1.45, click_affinity=1.0, buy_base=-2.7, buy_affinity=0.6, drift=0.5)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    n_items: int = 1000
    n_categories: int = 20
    latent_dim: int = 8
    item_noise: float = 0.5
    popularity_sd: float = 0.4
    category_skew: float = 1.0
    user_noise: float = 0.8
    ios_fraction: float = 0.5
    page_size: int = 20
    screen_size: int = 4
    click_seq_len: int = 10
    # cloud staleness: snapshot of the start-of-session preference plus noise
    cloud_noise: float = 0.6
    score_noise: float = 0.3
    position_bias: float = 0.35
    patience_mean: float = 14.0
    patience_sd: float = 4.0
    click_refill: float = 2.0
    purchase_refill: float = 2.0
    manual_threshold: float = 0.35
    manual_quit_prob: float = 0.35
    manual_penalty: float = 2.0
    view_seconds: float = 3.0
    stay_seconds: float = 25.0
    fetch_seconds: float = 0.5
    horizon_hours: float = 24.0
    start_weekday: int = 2
    android: BehaviorPreset = ANDROID_PRESET
    ios: BehaviorPreset = IOS_PRESET

    def preset(self, scene: DeviceScene) -> BehaviorPreset:
        return self.ios if scene == DeviceScene.IOS else self.android

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown world config keys: {unknown}")
        kwargs = dict(data)
        for key in ("android", "ios"):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = BehaviorPreset(**kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.n_items < self.page_size:
            raise ValueError("catalog must hold at least one page")
        if self.latent_dim < 2 or self.n_categories < 1:
            raise ValueError("latent_dim >= 2 and n_categories >= 1 required")
        if self.screen_size < 1 or self.page_size < 1:
            raise ValueError("page_size and screen_size must be positive")


def load_world_config(path: str | Path | None) -> WorldConfig:
    if path is None:
        return WorldConfig()
    data = json.loads(Path(path).read_text())
    return WorldConfig.from_dict(data.get("world", data))


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(n, 1e-12)


@dataclass
class Catalog:
    vectors: np.ndarray          # (n, k), unit rows
    categories: np.ndarray       # (n,)
    popularity: np.ndarray       # (n,)
    info: np.ndarray             # (n, 4) in [0, 1]
    centroids: np.ndarray        # (n_categories, k)

    def __len__(self) -> int:
        return len(self.vectors)


def generate_catalog(seed: int, n_items: int, n_categories: int, k: int,
                     item_noise: float = 0.5, popularity_sd: float = 0.4, category_skew: float = 0.0) -> Catalog:
    """Items scattered around unit-sphere category centroids.

    With ``category_skew > 0`` category sizes follow a Zipf law with that
    exponent, so some tastes run out of matching items after a page or two.
    """
    if n_items < 1 or k < 2:
        raise ValueError("need n_items >= 1 and k >= 2")
    rng = np.random.default_rng([seed, 0xCA7])
    centroids = _normalize(rng.normal(size=(n_categories, k)))
    if category_skew > 0:
        w = np.arange(1, n_categories + 1, dtype=np.float64) ** -category_skew
        categories = rng.choice(n_categories, size=n_items, p=w / w.sum())
    else:
        categories = rng.integers(0, n_categories, size=n_items)
    noise = rng.normal(size=(n_items, k)) * item_noise / math.sqrt(k)
    vectors = _normalize(centroids[categories] + noise)
    popularity = rng.normal(0.0, popularity_sd, size=n_items)
    # turnover, rating, price and recency proxies
    turnover = 1.0 / (1.0 + np.exp(-(popularity / max(popularity_sd, 1e-9)) - rng.normal(0, 0.3, n_items)))
    rating = rng.beta(5, 2, size=n_items)
    price = rng.beta(2, 3, size=n_items)
    recency = rng.random(n_items)
    info = np.stack([turnover, rating, price, recency], axis=1)
    return Catalog(vectors, categories, popularity, info, centroids)


def world_catalog(cfg: WorldConfig) -> Catalog:
    return generate_catalog(cfg.seed, cfg.n_items, cfg.n_categories, cfg.latent_dim,
                            cfg.item_noise, cfg.popularity_sd, cfg.category_skew)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class LatentUser:
    user_id: int
    pref: np.ndarray
    patience: float
    scene: DeviceScene
    drift: float
    start_time: float
    snapshot: np.ndarray = field(repr=False, default=None)
    # per-item uniforms keep outcomes coupled across policies
    u_click: np.ndarray = field(repr=False, default=None)
    u_buy: np.ndarray = field(repr=False, default=None)
    z_stay: np.ndarray = field(repr=False, default=None)
    u_quit: np.ndarray = field(repr=False, default=None)
    score_noise: np.ndarray = field(repr=False, default=None)

    def drift_toward(self, q: np.ndarray, eta: float | None = None) -> None:
        eta = self.drift if eta is None else eta
        if eta == 0.0:
            return
        self.pref = _normalize(self.pref + eta * q)


def _diurnal_density(hours: np.ndarray) -> np.ndarray:
    # lunch and dinner peaks over a flat base
    lunch = np.exp(-0.5 * ((hours - 12.0) / 1.5) ** 2)
    dinner = np.exp(-0.5 * ((hours - 18.5) / 2.0) ** 2)
    return 0.35 + lunch + 0.8 * dinner


def sample_start_time(rng: np.random.Generator, horizon_hours: float) -> float:
    grid = np.linspace(0.0, horizon_hours, 2049)
    dens = _diurnal_density(grid % 24.0)
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2.0)])
    cdf /= cdf[-1]
    hour = float(np.interp(rng.random(), cdf, grid))
    return hour * 3600.0


def make_user(cfg: WorldConfig, catalog: Catalog, run_seed: int, user_id: int) -> LatentUser:
    """Deterministic per ``(run_seed, user_id)``."""
    rng = np.random.default_rng([run_seed, user_id, 0x05E4])
    k = cfg.latent_dim
    fav = int(rng.integers(0, len(catalog.centroids)))
    pref = _normalize(catalog.centroids[fav] + rng.normal(size=k) * cfg.user_noise / math.sqrt(k))
    scene = DeviceScene.IOS if rng.random() < cfg.ios_fraction else DeviceScene.ANDROID
    patience = max(1.0, float(rng.normal(cfg.patience_mean, cfg.patience_sd)))
    start = sample_start_time(rng, cfg.horizon_hours)
    snapshot = _normalize(pref + rng.normal(size=k) * cfg.cloud_noise / math.sqrt(k))
    n = len(catalog)
    return LatentUser(
        user_id=user_id, pref=pref, patience=patience, scene=scene,
        drift=cfg.preset(scene).drift, start_time=start, snapshot=snapshot,
        u_click=rng.random(n), u_buy=rng.random(n), z_stay=rng.normal(size=n),
        u_quit=rng.random(256), score_noise=rng.normal(size=n) * cfg.score_noise,
    )


def position_bias(cfg: WorldConfig, pos: int) -> float:
    return cfg.position_bias * math.log1p(pos)


def click_probability(cfg: WorldConfig, catalog: Catalog, user: LatentUser, item: int, pos: int) -> float:
    p = cfg.preset(user.scene)
    a = float(user.pref @ catalog.vectors[item])
    return sigmoid(p.click_base + p.click_affinity * a + catalog.popularity[item] - position_bias(cfg, pos))


def purchase_probability(cfg: WorldConfig, catalog: Catalog, user: LatentUser, item: int) -> float:
    p = cfg.preset(user.scene)
    a = float(user.pref @ catalog.vectors[item])
    return sigmoid(p.buy_base + p.buy_affinity * a)


def expected_orders(cfg: WorldConfig, catalog: Catalog, user: LatentUser, items: list[int]) -> float:
    """Closed-form expected purchases over a fixed list viewed end to end with no drift."""
    return float(sum(click_probability(cfg, catalog, user, i, pos) * purchase_probability(cfg, catalog, user, i)
                     for pos, i in enumerate(items)))


@dataclass
class Reaction:
    clicked: bool
    purchased: bool
    stay: float


def react(cfg: WorldConfig, catalog: Catalog, user: LatentUser, item: int, pos: int,
          rng: np.random.Generator | None = None) -> Reaction:
    """User response to one exposed item; drifts the preference after a click.

    Without ``rng`` the user's per-item uniforms are used, so the same item at
    the same appeal gets the same outcome under any policy.
    """
    pc = click_probability(cfg, catalog, user, item, pos)
    u1 = user.u_click[item] if rng is None else rng.random()
    if u1 >= pc:
        return Reaction(False, False, 0.0)
    pb = purchase_probability(cfg, catalog, user, item)
    u2 = user.u_buy[item] if rng is None else rng.random()
    z = user.z_stay[item] if rng is None else rng.normal()
    a = float(user.pref @ catalog.vectors[item])
    stay = cfg.stay_seconds * (1.0 + max(a, 0.0)) * math.exp(0.5 * z)
    purchased = u2 < pb
    if purchased:
        stay += cfg.stay_seconds
    user.drift_toward(catalog.vectors[item])
    return Reaction(True, purchased, stay)


def best_remaining_appeal(catalog: Catalog, user: LatentUser, pool: list[int]) -> float:
    if not pool:
        return -math.inf
    return float((catalog.vectors[pool] @ user.pref).max())
