import json

import pytest

from edgesupply.cli import main
from edgesupply.experiments import ExperimentConfig, MetricsRecord, load_config, read_csv_body

TINY = {
    "world": {"n_items": 300, "n_categories": 6},
    "train": {"batch_size": 64},
    "train_sessions": 200,
    "eval_sessions": 20,
    "seeds": [0, 1],
    "alphas": [0.0, 0.05, 0.5],
}


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    models = root / "trained"
    assert main(["train", "--config", str(cfg), "--out", str(models)]) == 0
    return root, cfg, models / "models"


def _bodies(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def test_config_round_trip_and_validation(tmp_path):
    cfg = load_config(None)
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(alphas=(0.1, 0.0))
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        MetricsRecord("x", "y", ctr_auc=1.5)


def test_train_writes_checkpoints_and_curves(tiny):
    _, _, models = tiny
    for name in ("baseline", "dmr", "supply", "supply_no_rie", "supply_no_cie"):
        assert (models / f"{name}.ckpt").read_bytes().startswith(b"PPKT1")
        assert (models / f"loss_{name}.csv").read_text().startswith("step,epoch,loss\n")


def test_train_rerun_is_byte_identical(tiny, tmp_path):
    root, cfg, models = tiny
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--model", "supply"]) == 0
    assert (tmp_path / "models" / "supply.ckpt").read_bytes() == (models / "supply.ckpt").read_bytes()


@pytest.mark.parametrize("argv", [
    ["simulate", "--policy", "mr+ms", "--sessions", "15", "--alpha", "0.3"],
    ["eval"],
    ["trial"],
    ["ablate"],
    ["sweep"],
    ["stress"],
    ["params-count"],
    ["gen-world"],
])
def test_commands_are_deterministic(tiny, tmp_path, argv):
    _, cfg, models = tiny
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        extra = ["--models", str(models)] if argv[0] not in ("params-count", "gen-world") else []
        assert main([*argv, "--config", str(cfg), "--out", str(out), "--seed", "0", *extra]) == 0
        outs.append({p.name: _bodies(p) for p in sorted(out.glob("*.csv"))})
    assert outs[0] and outs[0] == outs[1]


def test_trial_rows_and_alpha_zero_sweep(tiny, tmp_path):
    _, cfg, models = tiny
    assert main(["trial", "--config", str(cfg), "--out", str(tmp_path), "--models", str(models)]) == 0
    rows = read_csv_body(tmp_path / "trial.csv")
    assert len(rows) == 2 * 2 * len(TINY["seeds"])
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path), "--models", str(models)]) == 0
    sweep = read_csv_body(tmp_path / "sweep.csv")
    assert len(sweep) == len(TINY["alphas"]) * len(TINY["seeds"])
    mr = {r["seed"]: r for r in rows if r["variant"] == "dmr/mr"}
    for r in sweep:
        if float(r["alpha"]) == 0.0:
            assert r["log_digest"] == mr[r["seed"]]["log_digest"]
            assert r["orders_per_session"] == mr[r["seed"]]["orders_per_session"]


def test_csv_header_carries_resolved_config(tiny, tmp_path):
    _, cfg, models = tiny
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path), "--models", str(models)]) == 0
    first = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert first.startswith("# config ")
    resolved = json.loads(first[len("# config "):])
    assert ExperimentConfig.from_dict(resolved).train_sessions == TINY["train_sessions"]
    assert len(read_csv_body(tmp_path / "ablation.csv")) == 3


def test_stress_conserves_requests(tiny, tmp_path):
    _, cfg, models = tiny
    assert main(["stress", "--config", str(cfg), "--out", str(tmp_path), "--models", str(models)]) == 0
    text = (tmp_path / "stress.csv").read_text()
    totals = dict(ln[2:].split(" ", 1) for ln in text.splitlines() if ln.startswith("# total_"))
    rows = read_csv_body(tmp_path / "stress.csv")
    assert sum(int(r["manual_policy"]) for r in rows) == int(totals["total_manual_policy"])
    assert sum(int(r["ms_policy"]) for r in rows) == int(totals["total_ms_policy"])


def test_missing_checkpoint_is_one_error_line(tmp_path, capsys):
    assert main(["trial", "--models", str(tmp_path / "none"), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: MissingCheckpointError: ")


def test_bad_config_is_one_error_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seeds": []}')
    assert main(["params-count", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigError: ")
