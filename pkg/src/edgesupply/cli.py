"""Command-line front door.

Every subcommand accepts ``--config`` (experiment JSON), ``--seed`` and
``--out``. Failures print one line ``error: <ErrorClass>: <message>`` to
stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import (DELTA_COLUMNS, MODEL_NAMES, RECORD_COLUMNS, STRESS_COLUMNS, ExperimentConfig, MetricsRecord,
                          Pipeline, experiment_ablation, experiment_alpha_sweep, experiment_controlled_trial,
                          experiment_stress, load_config, ranking_aucs, supply_aucs, sweep_means, write_csv,
                          write_records)
from .features import samples_to_csv
from .ranking import RANKERS
from .sim.engine import run_sessions, summarize
from .training import build_samples

SESSION_COLUMNS = ("session_id", "user_id", "scene", "clicks", "orders", "depth", "manual_requests",
                   "auto_requests", "duration", "exit_reason")
DECISION_COLUMNS = ("session_id", "page", "p_cv", "v_l", "v_g", "u_p", "alpha", "decision")
SCORE_COLUMNS = ("session_id", "item_id", "scene", "p_ctr", "p_cvr", "p_ctcvr", "rank")


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pipeline(args, cfg: ExperimentConfig, names=()) -> Pipeline:
    """Models come from ``--models`` when given (all must exist), else are trained into ``<out>/models``."""
    if getattr(args, "models", None):
        pipe = Pipeline(cfg, args.models)
        pipe.load_models(names)
        return pipe
    return Pipeline(cfg, _out(args) / "models", reuse=False)


def cmd_gen_world(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = Pipeline(cfg)
    (out / "world.json").write_text(json.dumps(cfg.world.to_dict(), indent=2, sort_keys=True) + "\n")
    cat = pipe.world.catalog
    rows = [(i, int(cat.categories[i]), float(cat.popularity[i]), *map(float, cat.info[i]),
             *map(float, cat.vectors[i])) for i in range(len(cat.categories))]
    k = cat.vectors.shape[1]
    header = ["item", "category", "popularity", *[f"info_{j}" for j in range(cat.info.shape[1])],
              *[f"q_{j}" for j in range(k)]]
    write_csv(out / "catalog.csv", header, rows, cfg.world.to_dict())
    print(f"catalog: {len(rows)} items -> {out / 'catalog.csv'}")


def cmd_simulate(args) -> None:
    cfg = _resolve(args)
    if args.alpha is not None:
        cfg = replace(cfg, alpha=args.alpha)
    out = _out(args)
    needs = {"logging": (), "mr": (args.ranker,), "mr+ms": (args.ranker, "supply")}[args.policy]
    pipe = _pipeline(args, cfg, needs) if needs else Pipeline(cfg)
    policy = pipe.policy(args.policy, args.ranker, manual_paging=not args.no_manual)
    run_seed = cfg.train.seed if args.seed is not None else 0
    results = run_sessions(pipe.world, policy, run_seed, range(args.sessions), record_scores=True)
    with open(out / "sessions.ndjson", "w") as fh:
        for r in results:
            fh.write(r.log.to_json() + "\n")
    meta = {"policy": args.policy, "run_seed": run_seed}
    write_csv(out / "sessions.csv", SESSION_COLUMNS,
              [(r.log.session_id, r.log.user_id, r.log.scene.name, r.metrics.clicks, r.metrics.orders,
                r.metrics.depth, r.metrics.manual_requests, r.metrics.auto_requests, r.metrics.duration,
                r.metrics.exit_reason) for r in results], cfg.to_dict(), meta)
    write_csv(out / "decisions.csv", DECISION_COLUMNS, [d for r in results for d in r.decisions], cfg.to_dict(), meta)
    write_csv(out / "scores.csv", SCORE_COLUMNS, [s for r in results for s in r.score_rows], cfg.to_dict(), meta)
    supply, ranking = build_samples([r.log for r in results], pipe.world, cfg.objective, cfg.label_freeze)
    (out / "supply_samples.csv").write_text(samples_to_csv("supply", supply))
    (out / "ranking_samples.csv").write_text(samples_to_csv("ranking", ranking))
    s = summarize(results)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))


def cmd_train(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = Pipeline(cfg, out / "models", reuse=False)
    for name in args.model or MODEL_NAMES:
        pipe.model(name)
        curve = (out / "models" / f"loss_{name}.csv").read_text().strip().splitlines()
        print(f"{name}: final loss {curve[-1].split(',')[-1]} -> {pipe.checkpoint_path(name)}")


def cmd_eval(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    names = args.model or MODEL_NAMES
    pipe = Pipeline(cfg, args.models)
    pipe.load_models(names)
    s = pipe.samples()
    wc = cfg.world
    records = []
    for name in names:
        if name in RANKERS:
            ctr, ctcvr = ranking_aucs(pipe.model(name), s["ranking_test"], wc.click_seq_len)
            records.append(MetricsRecord("eval", name, cfg.train.seed, ctr_auc=ctr, ctcvr_auc=ctcvr,
                                         sessions=len(s["ranking_test"])))
        else:
            lo, gl, up = supply_aucs(pipe.model(name), s["supply_test"], wc.page_size, wc.click_seq_len)
            records.append(MetricsRecord("eval", name, cfg.train.seed, local_auc=lo, global_auc=gl, uplift_auc=up,
                                         sessions=len(s["supply_test"])))
    write_records(out / "eval.csv", records, cfg)
    _print_records(records)


def _print_records(records) -> None:
    for r in records:
        vals = [f"{c}={getattr(r, c):.4f}" for c in RECORD_COLUMNS[4:-2] if getattr(r, c) is not None]
        print(r.variant, "" if r.seed is None else f"seed={r.seed}",
              "" if r.alpha is None else f"alpha={r.alpha}", " ".join(vals))


def cmd_trial(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = _pipeline(args, cfg, ("baseline", "dmr", "supply"))
    records, deltas = experiment_controlled_trial(pipe)
    write_records(out / "trial.csv", records, cfg)
    write_csv(out / "trial_deltas.csv", DELTA_COLUMNS, deltas, cfg.to_dict())
    for ranker in ("baseline", "dmr"):
        d = [x for x in deltas if x[0] == ranker]
        wins = sum(1 for x in d if x[4] >= 0)
        print(f"{ranker}: MR+MS >= MR on {wins}/{len(d)} seeds, mean delta {sum(x[4] for x in d) / len(d):+.4f}")


def cmd_ablate(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = _pipeline(args, cfg, ("supply", "supply_no_rie", "supply_no_cie"))
    records = experiment_ablation(pipe)
    write_records(out / "ablation.csv", records, cfg)
    _print_records(records)


def cmd_sweep(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = _pipeline(args, cfg, ("dmr", "supply"))
    records = experiment_alpha_sweep(pipe)
    write_records(out / "sweep.csv", records, cfg)
    for a, m in sweep_means(records).items():
        print(f"alpha={a} orders_per_session={m:.4f}")


def cmd_stress(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = _pipeline(args, cfg, ("dmr", "supply"))
    res = experiment_stress(pipe)
    meta = {f"total_{k}": v for k, v in res.totals.items()}
    meta["max_relative_deviation"] = repr(res.max_deviation)
    write_csv(out / "stress.csv", STRESS_COLUMNS, res.rows, cfg.to_dict(), meta)
    print(f"max per-bin relative deviation {res.max_deviation:.4f} totals {res.totals}")


def cmd_params_count(args) -> None:
    cfg = _resolve(args)
    out = _out(args)
    pipe = Pipeline(cfg)
    rows = [(name, pipe.new_model(name).n_params()) for name in ("dmr", "baseline", "supply")]
    write_csv(out / "params.csv", ("model", "params"), rows, cfg.to_dict())
    for name, n in rows:
        print(f"{name} {n}")


COMMANDS = {
    "gen-world": (cmd_gen_world, "write the resolved world config and the item catalog"),
    "simulate": (cmd_simulate, "simulate sessions and write logs, metrics, decisions, scores and samples"),
    "train": (cmd_train, "train models on logging-policy samples, writing checkpoints and loss curves"),
    "eval": (cmd_eval, "offline AUCs of saved checkpoints on held-out samples"),
    "trial": (cmd_trial, "controlled trial: {baseline, DMR} x {MR, MR+MS} x seeds"),
    "ablate": (cmd_ablate, "uplift-model ablation: full, without RIE, without CIE"),
    "sweep": (cmd_sweep, "orders per session over the alpha grid"),
    "stress": (cmd_stress, "paging-request curves: auto paging vs manual paging"),
    "params-count": (cmd_params_count, "parameter counts under the configured dims"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults when omitted)")
    common.add_argument("--seed", type=int, help="training seed (and run seed for simulate)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="edgesupply", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=h) for name, (_, h) in COMMANDS.items()}
    for name in ("simulate", "eval", "trial", "ablate", "sweep", "stress"):
        parsers[name].add_argument("--models", help="directory with saved checkpoints")
    for name in ("train", "eval"):
        parsers[name].add_argument("--model", action="append", choices=MODEL_NAMES,
                                   help="restrict to this model (repeatable)")
    s = parsers["simulate"]
    s.add_argument("--policy", choices=("logging", "mr", "mr+ms"), default="logging")
    s.add_argument("--ranker", choices=tuple(RANKERS), default="dmr")
    s.add_argument("--sessions", type=int, default=100)
    s.add_argument("--alpha", type=float)
    s.add_argument("--no-manual", action="store_true", help="disable manual paging after the first page")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command][0](args)
    except Exception as exc:  # reported as one parsable line
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
