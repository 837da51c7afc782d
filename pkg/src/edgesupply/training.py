"""Log collection, sample batching and the mini-batch training loop."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .features import RankingSample, SessionLog, SupplySample, emit_training_logs, ranking_arrays, supply_arrays
from .layers import Module
from .optim import Adagrad, TrainingError
from .sim.engine import Policy, World, run_sessions
from .supply import SupplyModel, supply_loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 256
    lr: float = 0.005
    decay: float = 0.0
    initial_accumulator: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def is_holdout(user_id: int, buckets: int = 10) -> bool:
    """Stable user split: roughly one user in ``buckets`` is held out."""
    h = (int(user_id) * 2654435761) & 0xFFFFFFFF
    return (h >> 16) % buckets == 0


def collect_logs(world: World, run_seed: int, session_ids, policy: Policy | None = None) -> list[SessionLog]:
    """Session logs under ``policy`` (server order, manual paging by default)."""
    results = run_sessions(world, policy or Policy("logging"), run_seed, session_ids)
    return [r.log for r in results]


def build_samples(logs: Sequence[SessionLog], world: World, objective: str = "special",
                  label_freeze: str = "page_exit") -> tuple[list[SupplySample], list[RankingSample]]:
    cfg = world.cfg
    supply, ranking = [], []
    for log in logs:
        s, r = emit_training_logs(log, cfg.page_size, cfg.click_seq_len, objective, label_freeze, cfg.start_weekday)
        supply.extend(s)
        ranking.extend(r)
    return supply, ranking


def ranking_batch(samples: Sequence[RankingSample], click_seq_len: int) -> tuple[dict, dict]:
    arr = ranking_arrays([s.bundle for s in samples], click_seq_len)
    labels = {"click": np.array([s.click for s in samples], dtype=np.float64),
              "ctcvr": np.array([s.ctcvr for s in samples], dtype=np.float64)}
    return arr, labels


def supply_batch(samples: Sequence[SupplySample], page_size: int, click_seq_len: int) -> tuple[dict, dict]:
    arr = supply_arrays([s.inp for s in samples], page_size, click_seq_len)
    labels = {"v_l": np.array([s.v_l for s in samples], dtype=np.float64),
              "v_g": np.array([s.v_g for s in samples], dtype=np.float64)}
    return arr, labels


def _take(d: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in d.items()}


def fit(model: Module, arr: dict[str, np.ndarray], labels: dict[str, np.ndarray],
        loss_fn: Callable[[Module, dict, dict], T.Tensor], cfg: TrainConfig) -> list[tuple[int, int, float]]:
    """Seeded shuffled mini-batch Adagrad. Returns ``(step, epoch, loss)`` rows."""
    n = len(next(iter(labels.values())))
    if n == 0:
        raise TrainingError("no training samples")
    params = model.named_parameters()
    opt = Adagrad(cfg.lr, cfg.decay, cfg.initial_accumulator)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            with T.Tape() as tape:
                loss = loss_fn(model, _take(arr, idx), _take(labels, idx))
                grads = T.backward(tape, loss)
            full = {name: grads.get(name, np.zeros_like(p.data)) for name, p in params.items()}
            opt.step(params, full)
            curve.append((opt.state.step, epoch, float(loss.data)))
    return curve


def _ranker_loss(model, arr, labels):
    return model.loss(model(arr), labels["click"], labels["ctcvr"])


def train_ranker(model: Module, samples: Sequence[RankingSample], cfg: TrainConfig, click_seq_len: int):
    arr, labels = ranking_batch(samples, click_seq_len)
    return fit(model, arr, labels, _ranker_loss, cfg)


def train_supply(model: SupplyModel, samples: Sequence[SupplySample], cfg: TrainConfig,
                 page_size: int, click_seq_len: int):
    arr, labels = supply_batch(samples, page_size, click_seq_len)

    def loss_fn(m, a, y):
        return supply_loss(m(a), y["v_l"], y["v_g"], m.objective)

    return fit(model, arr, labels, loss_fn, cfg)


def predict(model: Module, arr: dict[str, np.ndarray], fields: Sequence[str], chunk: int = 4096) -> dict[str, np.ndarray]:
    """Run ``model`` over ``arr`` in fixed-size chunks and gather the named output fields."""
    n = len(next(iter(arr.values())))
    parts: dict[str, list[np.ndarray]] = {f: [] for f in fields}
    for start in range(0, n, chunk):
        out = model(_take(arr, np.arange(start, min(n, start + chunk))))
        for f in fields:
            parts[f].append(getattr(out, f).data.ravel())
    return {f: np.concatenate(v) if v else np.zeros(0) for f, v in parts.items()}


def loss_curve_csv(curve: Sequence[tuple[int, int, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss"])
    for step, epoch, loss in curve:
        w.writerow([step, epoch, repr(loss)])
    return buf.getvalue()


def write_loss_curve(path: str | Path, curve) -> None:
    Path(path).write_text(loss_curve_csv(curve))
