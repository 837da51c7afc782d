"""End-to-end acceptance suite: one test per criterion, one printed pass/fail line each.

The default-world criteria (4 to 7) share one trained pipeline. Training it
takes a while; set ``EDGESUPPLY_MODEL_DIR`` to a directory of checkpoints
written by ``edgesupply train`` under the default config to reuse them.
Checkpoints are deterministic, so reuse gives the same numbers.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from edgesupply.cli import main
from edgesupply.experiments import (ExperimentConfig, Pipeline, experiment_ablation, experiment_alpha_sweep,
                                    experiment_controlled_trial, experiment_stress, read_csv_body, sweep_means)
from edgesupply.layers import DeviceScene
from edgesupply.metrics import auc, auc_bruteforce
from edgesupply.ranking import DMR
from edgesupply.supply import SupplyModel

from helpers import GRADIENT_CASES, SMALL_VOCAB, _randomize, random_ranking_arrays, random_supply_arrays, \
    worst_gradient_error

pytestmark = pytest.mark.slow

TRIAL_BUDGET_S = 30 * 60


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    model_dir = os.environ.get("EDGESUPPLY_MODEL_DIR") or tmp_path_factory.mktemp("acceptance_models")
    pipe = Pipeline(ExperimentConfig(), model_dir=model_dir)
    for name in ("baseline", "dmr", "supply", "supply_no_rie", "supply_no_cie"):
        pipe.model(name)
    return pipe


@pytest.fixture(scope="module")
def trial(pipeline):
    start = time.perf_counter()
    records, deltas = experiment_controlled_trial(pipeline)
    return records, deltas, time.perf_counter() - start


def test_criterion_1_gradient_oracle(acceptance_report):
    start = time.perf_counter()
    errors = {name: worst_gradient_error(name, n_points=20) for name in sorted(GRADIENT_CASES)}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    acceptance_report(1, "gradient oracle", ok,
                      f"{len(errors)} cases, worst {worst} {errors[worst]:.2e} < 1e-4, {elapsed:.1f}s < 60s")
    assert ok


def test_criterion_2_structural_invariants(acceptance_report):
    rng = np.random.default_rng(0)
    sup = SupplyModel(SMALL_VOCAB, seed=0)
    _randomize(sup, rng, scale=0.3)
    est = sup(random_supply_arrays(rng, 10_000))
    u_p, v_l, v_g = est.u_p.data, est.v_l.data, est.v_g.data
    sum_err = float(np.abs(v_g - (u_p + v_l)).max())

    dmr = DMR(SMALL_VOCAB, seed=0)
    _randomize(dmr, rng, scale=0.3)
    arr = random_ranking_arrays(rng, 2000)
    out = dmr(arr)
    product_exact = bool(np.array_equal(out.p_ctcvr.data, out.p_ctr.data * out.p_cvr.data))

    gate_err = 0.0
    for module in (dmr.smmoe, sup.um):
        width = module.in_dim if module is dmr.smmoe else module.gate_dim
        for w in module.gate_weights(rng.normal(size=(1000, width)) * 10):
            gate_err = max(gate_err, float(np.abs(w.data.sum(axis=1) - 1).max()))

    before = dmr(arr)
    for p in dmr.smmoe.ios.named_parameters().values():
        p.data = rng.normal(size=p.shape)
    after = dmr(arr)
    android = arr["scene"] == DeviceScene.ANDROID
    isolated = bool(np.array_equal(before.p_ctr.data[android], after.p_ctr.data[android])
                    and np.array_equal(before.p_cvr.data[android], after.p_cvr.data[android]))

    ok = bool((u_p >= 0).all()) and sum_err <= 1e-12 and product_exact and gate_err <= 1e-12 and isolated
    acceptance_report(2, "structural invariants", ok,
                      f"min u_p {u_p.min():.3g} >= 0, |v_g-(u_p+v_l)| {sum_err:.1e}, ctcvr product exact "
                      f"{product_exact}, gate sum err {gate_err:.1e}, scene isolation {isolated}")
    assert ok


def test_criterion_3_auc_oracle(acceptance_report):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 30))
        scores = rng.integers(0, 5, size=n) / 4.0
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        mismatches += auc(scores, labels) != auc_bruteforce(scores, labels)
    worked = auc([0.8, 0.6, 0.6, 0.2], [1, 1, 0, 0])
    ok = mismatches == 0 and worked == 0.875
    acceptance_report(3, "AUC oracle", ok, f"{mismatches} mismatches in 100 instances, worked case {worked}")
    assert ok


def test_criterion_4_controlled_trial(acceptance_report, trial):
    records, deltas, elapsed = trial
    dmr_deltas = [d for d in deltas if d[0] == "dmr"]
    wins = sum(d[4] >= 0 for d in dmr_deltas)
    ctr = {r.variant.split("/")[0]: r.ctr_auc for r in records}
    gap = ctr["dmr"] - ctr["baseline"]
    ok = wins >= 8 and gap >= 0.01 and elapsed < TRIAL_BUDGET_S
    acceptance_report(4, "controlled trial", ok,
                      f"MR+MS >= MR on {wins}/{len(dmr_deltas)} seeds (need 8), CTR-AUC dmr {ctr['dmr']:.4f} - "
                      f"baseline {ctr['baseline']:.4f} = {gap:.4f} (need 0.01), {elapsed / 60:.1f} min < 30")
    assert ok


def test_criterion_5_ablation(acceptance_report, pipeline):
    up = {r.variant: r.uplift_auc for r in experiment_ablation(pipeline)}
    full, no_cie, no_rie = up["supply"], up["supply_no_cie"], up["supply_no_rie"]
    ok = full - no_cie >= 0.005 and no_cie - no_rie >= 0.005
    acceptance_report(5, "ablation ordering", ok,
                      f"uplift AUC full {full:.4f} > w/o CIE {no_cie:.4f} > w/o RIE {no_rie:.4f}, "
                      f"gaps {full - no_cie:.4f} and {no_cie - no_rie:.4f} (need 0.005)")
    assert ok


def test_criterion_6_alpha_sweep(acceptance_report, pipeline, trial):
    records = experiment_alpha_sweep(pipeline)
    means = sweep_means(records)
    alphas = list(means)
    best = max(alphas, key=means.get)
    interior = alphas[0] < best < alphas[-1]
    mr_digest = {r.seed: r.log_digest for r in trial[0] if r.variant == "dmr/mr"}
    zero = {r.seed: r.log_digest for r in records if r.alpha == 0.0}
    identical = zero == mr_digest
    ok = interior and identical
    curve = ", ".join(f"{a:g}:{m:.4f}" for a, m in means.items())
    acceptance_report(6, "alpha sweep", ok,
                      f"argmax alpha {best:g} interior {interior}, alpha=0 logs identical to MR-only {identical} "
                      f"[{curve}]")
    assert ok


def test_criterion_7_stress(acceptance_report, pipeline):
    res = experiment_stress(pipeline)
    ok = res.max_deviation <= 0.20
    acceptance_report(7, "stress similarity", ok, f"max per-bin relative deviation {res.max_deviation:.4f} <= 0.20, "
                                                  f"requests {res.totals}")
    assert ok


SMALL = {
    "world": {"n_items": 300, "n_categories": 6},
    "train": {"batch_size": 64},
    "train_sessions": 200,
    "eval_sessions": 20,
    "seeds": [0, 1],
    "alphas": [0.0, 0.05, 0.5],
}
COMMANDS = (["gen-world"], ["simulate", "--policy", "mr+ms", "--sessions", "20"], ["eval"], ["trial"],
            ["ablate"], ["sweep"], ["stress"], ["params-count"])


def _run_all(root: Path, cfg: Path) -> dict[str, bytes | list[str]]:
    base = ["--config", str(cfg), "--seed", "7"]
    assert main(["train", *base, "--out", str(root / "train")]) == 0
    models = root / "train" / "models"
    out = {p.name: p.read_bytes() for p in sorted(models.glob("*.ckpt"))}
    for argv in COMMANDS:
        dest = root / argv[0]
        needs_models = argv[0] not in ("gen-world", "params-count")
        assert main([*argv, *base, "--out", str(dest), *(["--models", str(models)] if needs_models else [])]) == 0
        for p in sorted(dest.glob("*.csv")):
            out[f"{argv[0]}/{p.name}"] = [ln for ln in p.read_text().splitlines() if not ln.startswith("#")]
    return out


def test_criterion_8_cli_determinism(acceptance_report, tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps(SMALL))
    a, b = _run_all(tmp_path / "a", cfg), _run_all(tmp_path / "b", cfg)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = not differing and len(a) > len(COMMANDS)
    acceptance_report(8, "CLI determinism", ok,
                      f"{len(a)} outputs compared over train + {len(COMMANDS)} commands, differing: {differing}")
    assert ok


def test_criterion_9_params_count(acceptance_report, tmp_path):
    assert main(["params-count", "--out", str(tmp_path)]) == 0
    counts = {r["model"]: int(r["params"]) for r in read_csv_body(tmp_path / "params.csv")}
    ok = 30_000 <= counts["dmr"] <= 45_000 and 20_000 <= counts["supply"] <= 140_000
    acceptance_report(9, "model size", ok,
                      f"DMR {counts['dmr']} in [30K, 45K], Mobile Supply {counts['supply']} in [20K, 140K]")
    assert ok
