"""Experiment configuration, the shared training pipeline and the four experiments.

Every experiment writes CSV whose leading ``#`` lines carry the fully
resolved configuration, so a rerun needs nothing but the output file.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import ModelDims, Vocab
from .features import RankingSample, SupplySample
from .metrics import auc
from .optim import load_checkpoint, save_checkpoint
from .ranking import RANKERS
from .sim.engine import Policy, SessionResult, World, run_sessions, summarize
from .sim.stress import max_relative_deviation, relative_deviation, stress_curve
from .sim.world import WorldConfig
from .supply import SupplyConfig, SupplyModel, uplift_label
from .training import (TrainConfig, build_samples, collect_logs, is_holdout, predict, ranking_batch, supply_batch,
                       train_ranker, train_supply, write_loss_curve)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    dims: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, initial_accumulator=0.1))
    seeds: tuple[int, ...] = tuple(range(10))
    alphas: tuple[float, ...] = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
    alpha: float = 0.05
    objective: str = "special"
    label_freeze: str = "page_exit"
    checkpoint_every: int = 4
    max_auto_pages: int = 3
    train_sessions: int = 50_000
    train_run_seed: int = 1000
    eval_sessions: int = 1000
    # stress-test threshold; None reuses alpha. 0.02 matches manual request volume on seeds 100-104
    stress_alpha: float | None = 0.02
    bin_minutes: float = 30.0
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if list(self.alphas) != sorted(self.alphas):
            raise ConfigError("alpha grid must be sorted ascending")
        if self.train_sessions < 1 or self.eval_sessions < 1:
            raise ConfigError("session counts must be positive")
        self.supply_config()

    def supply_config(self, alpha: float | None = None) -> SupplyConfig:
        return SupplyConfig(self.alpha if alpha is None else alpha, self.objective, self.checkpoint_every,
                            self.max_auto_pages)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["world"] = self.world.to_dict()
        d["dims"] = self.dims.to_dict()
        d["train"] = self.train.to_dict()
        d["seeds"] = list(self.seeds)
        d["alphas"] = list(self.alphas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(d)
        if "world" in kw:
            kw["world"] = WorldConfig.from_dict(kw["world"])
        if "dims" in kw:
            kw["dims"] = ModelDims.from_dict(kw["dims"])
        if "train" in kw:
            t = kw["train"]
            bad = sorted(set(t) - {f.name for f in fields(TrainConfig)})
            if bad:
                raise ConfigError(f"unknown train keys: {', '.join(bad)}")
            kw["train"] = replace(cls().train, **t)
        for key in ("seeds", "alphas"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(d)


# -- records and CSV ----------------------------------------------------------

RECORD_COLUMNS = ("experiment", "variant", "seed", "alpha", "ctr_auc", "ctcvr_auc", "local_auc", "global_auc",
                  "uplift_auc", "orders_per_session", "clicks_per_session", "depth", "manual_requests",
                  "auto_requests", "sessions", "log_digest")


@dataclass
class MetricsRecord:
    experiment: str
    variant: str
    seed: int | None = None
    alpha: float | None = None
    ctr_auc: float | None = None
    ctcvr_auc: float | None = None
    local_auc: float | None = None
    global_auc: float | None = None
    uplift_auc: float | None = None
    orders_per_session: float | None = None
    clicks_per_session: float | None = None
    depth: float | None = None
    manual_requests: float | None = None
    auto_requests: float | None = None
    sessions: int | None = None
    log_digest: str | None = None

    def __post_init__(self):
        for name in ("ctr_auc", "ctcvr_auc", "local_auc", "global_auc", "uplift_auc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def row(self) -> list:
        return [_fmt(getattr(self, c)) for c in RECORD_COLUMNS]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path | None, header: Sequence[str], rows: Sequence[Sequence], config: dict | None = None,
              meta: dict | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config " + json.dumps(config, sort_keys=True, separators=(",", ":")) + "\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k} {v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_csv_body(path: str | Path) -> list[dict[str, str]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def sort_records(records: Sequence[MetricsRecord]) -> list[MetricsRecord]:
    return sorted(records, key=lambda r: (r.variant, -1 if r.seed is None else r.seed,
                                          -1.0 if r.alpha is None else r.alpha))


def write_records(path, records: Sequence[MetricsRecord], cfg: ExperimentConfig, meta: dict | None = None) -> str:
    return write_csv(path, RECORD_COLUMNS, [r.row() for r in sort_records(records)], cfg.to_dict(), meta)


def log_digest(results: Sequence[SessionResult]) -> str:
    h = hashlib.sha256()
    for r in results:
        h.update(r.log.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# -- training pipeline --------------------------------------------------------

SUPPLY_VARIANTS = {"supply": None, "supply_no_rie": "rie", "supply_no_cie": "cie"}
MODEL_NAMES = ("baseline", "dmr", *SUPPLY_VARIANTS)


class Pipeline:
    """Logging-policy logs, user-held-out samples and trained models, built lazily.

    With ``model_dir`` set, trained models are written there as checkpoints
    (with loss-curve CSVs) and reused on later calls when ``reuse`` is set.
    """

    def __init__(self, cfg: ExperimentConfig, model_dir: str | Path | None = None, reuse: bool = True):
        self.cfg = cfg
        self.world = World.build(cfg.world)
        self.vocab = Vocab.from_world(cfg.world)
        self.model_dir = Path(model_dir) if model_dir is not None else None
        self.reuse = reuse
        self._samples = None
        self._models: dict[str, object] = {}

    def samples(self) -> dict[str, list]:
        if self._samples is None:
            cfg = self.cfg
            log.info("simulating %d logging sessions", cfg.train_sessions)
            logs = collect_logs(self.world, cfg.train_run_seed, range(cfg.train_sessions))
            supply, ranking = build_samples(logs, self.world, cfg.objective, cfg.label_freeze)
            self._samples = {
                "supply_train": [s for s in supply if not is_holdout(s.user_id)],
                "supply_test": [s for s in supply if is_holdout(s.user_id)],
                "ranking_train": [s for s in ranking if not is_holdout(s.user_id)],
                "ranking_test": [s for s in ranking if is_holdout(s.user_id)],
            }
        return self._samples

    def new_model(self, name: str):
        if name in RANKERS:
            return RANKERS[name](self.vocab, self.cfg.dims, self.cfg.train.seed)
        if name in SUPPLY_VARIANTS:
            return SupplyModel(self.vocab, self.cfg.dims, self.cfg.train.seed, self.cfg.objective,
                               SUPPLY_VARIANTS[name])
        raise ConfigError(f"unknown model {name!r}")

    def checkpoint_path(self, name: str) -> Path | None:
        return None if self.model_dir is None else self.model_dir / f"{name}.ckpt"

    def model(self, name: str):
        if name in self._models:
            return self._models[name]
        path = self.checkpoint_path(name)
        if path is not None and self.reuse and path.exists():
            m = self.new_model(name)
            m.load_state_dict(load_checkpoint(path))
        else:
            m, curve = self.train_model(name)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, m.named_parameters())
                write_loss_curve(path.with_name(f"loss_{name}.csv"), curve)
        self._models[name] = m
        return m

    def train_model(self, name: str):
        m = self.new_model(name)
        s = self.samples()
        wc = self.cfg.world
        log.info("training %s", name)
        if name in RANKERS:
            curve = train_ranker(m, s["ranking_train"], self.cfg.train, wc.click_seq_len)
        else:
            curve = train_supply(m, s["supply_train"], self.cfg.train, wc.page_size, wc.click_seq_len)
        return m, curve

    def load_models(self, names: Sequence[str]) -> None:
        """Load checkpoints from ``model_dir``; a missing file is an error."""
        if self.model_dir is None:
            raise MissingCheckpointError("no model directory given")
        for name in names:
            path = self.checkpoint_path(name)
            if not path.exists():
                raise MissingCheckpointError(f"missing checkpoint {path}")
            m = self.new_model(name)
            m.load_state_dict(load_checkpoint(path))
            self._models[name] = m

    def policy(self, name: str, ranker: str = "dmr", alpha: float | None = None,
               supply: str = "supply", manual_paging: bool = True) -> Policy:
        r = None if name == "logging" else self.model(ranker)
        sup = self.model(supply) if name == "mr+ms" else None
        return Policy(name, r, sup, self.cfg.supply_config(alpha), manual_paging)


# -- offline evaluation -------------------------------------------------------

def ranking_aucs(model, samples: Sequence[RankingSample], click_seq_len: int) -> tuple[float, float]:
    arr, labels = ranking_batch(samples, click_seq_len)
    out = predict(model, arr, ("p_ctr", "p_ctcvr"))
    return auc(out["p_ctr"], labels["click"]), auc(out["p_ctcvr"], labels["ctcvr"])


def supply_aucs(model, samples: Sequence[SupplySample], page_size: int, click_seq_len: int) -> tuple[float, float, float]:
    """Local, global and uplift AUC; the uplift label is ``V_g = 1 and V_l = 0``."""
    arr, labels = supply_batch(samples, page_size, click_seq_len)
    out = predict(model, arr, ("v_l", "v_g", "u_p"))
    yl = (labels["v_l"] > 0).astype(int)
    yg = (labels["v_g"] > 0).astype(int)
    return (auc(out["v_l"], yl), auc(out["v_g"], yg),
            auc(out["u_p"], uplift_label(labels["v_l"] > 0, labels["v_g"] > 0)))


# -- online simulation --------------------------------------------------------

def _simulate(args) -> tuple[dict, str, list[SessionResult] | None]:
    world, policy, seed, n, keep = args
    results = run_sessions(world, policy, seed, range(n))
    return summarize(results), log_digest(results), (results if keep else None)


def simulate_many(world: World, jobs: Sequence[tuple[Policy, int]], n_sessions: int, workers: int = 1,
                  keep_results: bool = False) -> list[tuple[dict, str, list[SessionResult] | None]]:
    """Run ``(policy, seed)`` jobs; order of the output matches ``jobs``."""
    args = [(world, p, s, n_sessions, keep_results) for p, s in jobs]
    if workers <= 1:
        return [_simulate(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_simulate, args))


def _online_record(experiment, variant, seed, alpha, summary, digest, **extra) -> MetricsRecord:
    return MetricsRecord(experiment, variant, seed, alpha, orders_per_session=summary["orders_per_session"],
                         clicks_per_session=summary["clicks_per_session"], depth=summary["depth"],
                         manual_requests=summary["manual_requests"], auto_requests=summary["auto_requests"],
                         sessions=int(summary["sessions"]), log_digest=digest, **extra)


# -- experiments --------------------------------------------------------------

def experiment_controlled_trial(pipe: Pipeline) -> tuple[list[MetricsRecord], list[tuple]]:
    """{baseline, DMR} x {MR, MR+MS} x seeds. Returns records and paired deltas."""
    cfg = pipe.cfg
    wc = cfg.world
    test = pipe.samples()["ranking_test"]
    offline = {r: ranking_aucs(pipe.model(r), test, wc.click_seq_len) for r in ("baseline", "dmr")}
    jobs, keys = [], []
    for ranker in ("baseline", "dmr"):
        for pol in ("mr", "mr+ms"):
            policy = pipe.policy(pol, ranker)
            for seed in cfg.seeds:
                jobs.append((policy, seed))
                keys.append((ranker, pol, seed))
    outs = simulate_many(pipe.world, jobs, cfg.eval_sessions, cfg.workers)
    records = []
    for (ranker, pol, seed), (summary, digest, _) in zip(keys, outs):
        ctr, ctcvr = offline[ranker]
        records.append(_online_record("trial", f"{ranker}/{pol}", seed, cfg.alpha if pol == "mr+ms" else None,
                                      summary, digest, ctr_auc=ctr, ctcvr_auc=ctcvr))
    by_key = {(r.variant, r.seed): r for r in records}
    deltas = []
    for ranker in ("baseline", "dmr"):
        for seed in cfg.seeds:
            a, b = by_key[(f"{ranker}/mr", seed)], by_key[(f"{ranker}/mr+ms", seed)]
            deltas.append((ranker, seed, a.orders_per_session, b.orders_per_session,
                           b.orders_per_session - a.orders_per_session))
    return sort_records(records), deltas


DELTA_COLUMNS = ("ranker", "seed", "orders_mr", "orders_mr_ms", "delta")


def experiment_ablation(pipe: Pipeline) -> list[MetricsRecord]:
    cfg = pipe.cfg
    test = pipe.samples()["supply_test"]
    records = []
    for name in SUPPLY_VARIANTS:
        lo, gl, up = supply_aucs(pipe.model(name), test, cfg.world.page_size, cfg.world.click_seq_len)
        records.append(MetricsRecord("ablation", name, cfg.train.seed, local_auc=lo, global_auc=gl, uplift_auc=up,
                                     sessions=len(test)))
    return sort_records(records)


def experiment_alpha_sweep(pipe: Pipeline) -> list[MetricsRecord]:
    cfg = pipe.cfg
    jobs, keys = [], []
    for a in cfg.alphas:
        policy = pipe.policy("mr+ms", "dmr", alpha=a)
        for seed in cfg.seeds:
            jobs.append((policy, seed))
            keys.append((a, seed))
    outs = simulate_many(pipe.world, jobs, cfg.eval_sessions, cfg.workers)
    return sort_records([_online_record("sweep", "dmr/mr+ms", seed, a, summary, digest)
                         for (a, seed), (summary, digest, _) in zip(keys, outs)])


def sweep_means(records: Sequence[MetricsRecord]) -> dict[float, float]:
    by: dict[float, list[float]] = {}
    for r in records:
        by.setdefault(r.alpha, []).append(r.orders_per_session)
    return {a: float(np.mean(v)) for a, v in sorted(by.items())}


STRESS_COLUMNS = ("bin", "start_hour", "manual_policy", "ms_policy", "ms_policy_auto", "ms_policy_manual",
                  "relative_deviation")


@dataclass
class StressResult:
    rows: list[tuple]
    max_deviation: float
    totals: dict[str, int]


def experiment_stress(pipe: Pipeline) -> StressResult:
    """Manual-only paging vs MS auto-paging with manual paging off after the first page."""
    cfg = pipe.cfg
    alpha = cfg.alpha if cfg.stress_alpha is None else cfg.stress_alpha
    manual = pipe.policy("mr", "dmr")
    auto = pipe.policy("mr+ms", "dmr", alpha=alpha, manual_paging=False)
    jobs = [(p, s) for p in (manual, auto) for s in cfg.seeds]
    outs = simulate_many(pipe.world, jobs, cfg.eval_sessions, cfg.workers, keep_results=True)
    n = len(cfg.seeds)
    bin_s = cfg.bin_minutes * 60.0
    horizon = cfg.world.horizon_hours * 3600.0
    # session ids repeat across seeds, so merge per seed in seed order
    m_meter = [stress_curve([r.log for r in o[2]], bin_s, horizon) for o in outs[:n]]
    a_meter = [stress_curve([r.log for r in o[2]], bin_s, horizon) for o in outs[n:]]
    m_series = sum(m.series() for m in m_meter)
    a_auto = sum(m.series("auto") for m in a_meter)
    a_manual = sum(m.series("manual") for m in a_meter)
    a_series = a_auto + a_manual
    dev = relative_deviation(a_series, m_series)
    rows = [(i, i * cfg.bin_minutes / 60.0, int(m_series[i]), int(a_series[i]), int(a_auto[i]), int(a_manual[i]),
             float(dev[i])) for i in range(len(m_series))]
    totals = {"manual_policy": int(sum(m.total() for m in m_meter)),
              "ms_policy": int(sum(m.total() for m in a_meter))}
    return StressResult(rows, max_relative_deviation(a_series, m_series), totals)
