import json

import numpy as np
import pytest

from m3h.cli import bootstrap_compare, read_metrics_csv, run
from m3h.data import load_dataset
from m3h.errors import ContractError, DomainError
from m3h.evaluation import auroc
from m3h.model import load_model
from m3h.tim import read_heatmap_csv

SYNTH = {
    "n_patients": 60,
    "samples_per_patient": 2,
    "modalities": [{"name": "tab", "dim": 4}, {"name": "img", "dim": 6}],
    "tasks": [
        {"name": "a", "class": "binary"},
        {"name": "b", "class": "binary"},
        {"name": "r", "class": "regression"},
    ],
    "task_correlation": 0.8,
    "seed": 0,
}

SMALL_MODEL = {
    "modality_hidden": [8, 8],
    "shared_hidden": [8, 8],
    "task_embed_dim": 8,
    "contrastive_proj_dim": 4,
    "autoencoder_hidden": 8,
    "autoencoder_latent": 4,
}


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "synth.json").write_text(json.dumps(SYNTH))
    assert run(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "data"), "--seed", "7"]) == 0
    exp = {
        "manifest": "data/dataset.json",
        "model": SMALL_MODEL,
        "train": {"epochs": 2, "batch_size": 32, "batch_sizes": [32], "learning_rates": [0.001, 0.01], "folds": 3},
        "out": "out",
        "seed": 3,
    }
    (tmp_path / "exp.json").write_text(json.dumps(exp))
    return tmp_path


def test_synth_round_trip(workspace):
    ds = load_dataset(workspace / "data" / "dataset.json")
    assert len(ds) == 120
    assert [t.name for t in ds.tasks] == ["a", "b", "r"]
    saved = json.loads((workspace / "data" / "synth_config.json").read_text())
    assert saved["seed"] == 7


def test_train_then_eval_reproduces_metrics(workspace):
    cfg = str(workspace / "exp.json")
    assert run(["train", "--config", cfg]) == 0
    out = workspace / "out"
    for name in ("model.m3h", "metrics.csv", "train_log.csv", "run.json"):
        assert (out / name).exists()
    assert run(["eval", "--config", cfg]) == 0
    trained = read_metrics_csv(out / "metrics.csv")
    evaluated = read_metrics_csv(out / "eval_metrics.csv")
    assert trained == evaluated
    assert (out / "metrics.csv").read_text() == (out / "eval_metrics.csv").read_text()


def test_task_subset_and_alpha_override(workspace):
    cfg = str(workspace / "exp.json")
    assert run(["train", "--config", cfg, "--tasks", "b,a", "--alpha", "0.5", "--out", str(workspace / "sub")]) == 0
    model = load_model(workspace / "sub" / "model.m3h")
    assert [t.name for t in model.tasks] == ["a", "b"]
    assert model.config.alpha == 0.5


def test_cv_writes_selection_table(workspace):
    assert run(["cv", "--config", str(workspace / "exp.json")]) == 0
    lines = (workspace / "out" / "selection.csv").read_text().splitlines()
    assert lines[0] == "batch_size,learning_rate,mean_score,fold_0,fold_1,fold_2,selected"
    assert len(lines) == 3
    assert sum(int(l.split(",")[-1]) for l in lines[1:]) == 1


def test_train_with_cv_flag_runs_the_grid(workspace):
    exp = json.loads((workspace / "exp.json").read_text())
    (workspace / "cv.json").write_text(json.dumps({**exp, "cv": True}))
    assert run(["train", "--config", str(workspace / "cv.json")]) == 0
    assert (workspace / "out" / "selection.csv").exists()
    assert (workspace / "out" / "model.m3h").exists()


def test_tim_and_select_outputs(workspace):
    cfg = str(workspace / "exp.json")
    assert run(["tim", "--config", cfg, "--tasks", "a,b"]) == 0
    tasks, matrix = read_heatmap_csv((workspace / "out" / "tim_heatmap.csv").read_text())
    assert tasks == ["a", "b"] and matrix.shape == (2, 2)
    assert matrix[0, 0] == 0.0 and matrix[1, 1] == 0.0
    rows = (workspace / "out" / "tim.csv").read_text().splitlines()
    assert rows[0] == "source,added,delta,mode,n_subsets,seed" and len(rows) == 3

    assert run(["select", "--config", cfg, "--tasks", "a,b", "--source", "a", "--beam", "2"]) == 0
    best = (workspace / "out" / "select_best.txt").read_text().strip()
    assert best.split("+")[0] == "a"


def test_eval_with_baseline_bootstrap(workspace):
    cfg = str(workspace / "exp.json")
    assert run(["train", "--config", cfg, "--out", str(workspace / "joint")]) == 0
    assert run(["train", "--config", cfg, "--tasks", "a", "--out", str(workspace / "single")]) == 0
    code = run([
        "eval", "--config", cfg, "--checkpoint", str(workspace / "joint" / "model.m3h"),
        "--baseline", str(workspace / "single" / "model.m3h"), "--source", "a", "--boot", "200",
    ])
    assert code == 0
    lines = (workspace / "out" / "bootstrap.csv").read_text().splitlines()
    assert lines[0] == "task,metric,delta,lower,upper,n_boot,seed"
    _, _, delta, lo, hi, n_boot, _ = lines[1].split(",")
    assert float(lo) <= float(hi) and n_boot == "200"


def test_exit_codes(workspace, capsys):
    assert run(["--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["frobnicate"]) == 2
    assert run(["train", "--config", str(workspace / "missing.json")]) == 2
    assert run(["train", "--config", str(workspace / "exp.json"), "--tasks", "nope"]) == 2
    (workspace / "bad.json").write_text(json.dumps({"manifest": "data/dataset.json", "colour": 1}))
    assert run(["train", "--config", str(workspace / "bad.json")]) == 2
    # a corrupt checkpoint is a runtime failure
    (workspace / "junk.m3h").write_bytes(b"junk")
    assert run(["eval", "--config", str(workspace / "exp.json"), "--checkpoint", str(workspace / "junk.m3h")]) == 1
    (workspace / "nodata.json").write_text(json.dumps({"manifest": "nowhere.json"}))
    assert run(["train", "--config", str(workspace / "nodata.json")]) == 1


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--points", "1", "--tol", "1e-3"]) == 0
    assert "PASS" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# bootstrap


def test_bootstrap_identical_inputs():
    x = np.random.default_rng(0).uniform(size=50)
    delta, lo, hi = bootstrap_compare(x, x, 500, seed=1)
    assert delta == 0.0 and lo <= 0.0 <= hi


def test_bootstrap_is_seeded():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=40), rng.uniform(size=40)
    assert bootstrap_compare(a, b, 300, seed=5) == bootstrap_compare(a, b, 300, seed=5)


def test_bootstrap_dominance_gives_positive_lower_bound():
    rng = np.random.default_rng(2)
    b = rng.uniform(size=60)
    a = b + rng.uniform(0.05, 0.2, size=60)
    _, lo, _ = bootstrap_compare(a, b, 1000, seed=0)
    assert lo > 0


def test_bootstrap_with_auroc_metric():
    rng = np.random.default_rng(3)
    y = np.r_[0, 1, rng.integers(0, 2, 58)]
    good = y + rng.normal(0, 0.3, 60)
    bad = rng.normal(size=60)
    delta, lo, hi = bootstrap_compare(good, bad, 500, seed=0, labels=y, metric=auroc)
    assert delta == pytest.approx(auroc(good, y) - auroc(bad, y))
    assert lo > 0 and lo <= delta <= hi


def test_bootstrap_errors():
    with pytest.raises(ContractError):
        bootstrap_compare([1.0, 2.0], [1.0], 100)
    with pytest.raises(DomainError):
        bootstrap_compare([1.0], [1.0], 99)
