"""End-to-end checks of the gen/train/eval command line."""

import csv
import json
import logging

import numpy as np
import pytest

from gridcharge.cli import _safe_name, default_workers, main, parse_gen_config
from gridcharge.controllers import load_params, make_controller
from gridcharge.data import load_dataset
from gridcharge.optim import SMOOTHING_GRID

TINY = [
    "--config", "households=2",
    "--config", "train_days=2",
    "--config", "tune_days=1",
    "--config", "test_days=1",
]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny"
    rc = run("gen", "--out", path, "--seed", 7, *TINY)
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    """Params file from a very short CMA-ES run."""
    path = tmp_path_factory.mktemp("params") / "nn.json"
    rc = run(
        "train", "--data", dataset, "--out", path,
        "--iterations", 2, "--popsize", 4, "--workers", 1, "--seed", 3,
    )
    assert rc == 0
    return path


def test_gen_writes_dataset_files(dataset):
    for name in ("loads.csv", "requests.csv", "travels.csv", "splits.json"):
        assert (dataset / name).exists()
    scenario, splits = load_dataset(dataset)
    assert scenario.n_households == 2
    assert scenario.timebase.n_steps == 4 * 96
    assert set(splits) == {"train", "tune", "test"}


def test_gen_is_deterministic(tmp_path):
    run("gen", "--out", tmp_path / "a", "--seed", 9, *TINY)
    run("gen", "--out", tmp_path / "b", "--seed", 9, *TINY)
    run("gen", "--out", tmp_path / "c", "--seed", 10, *TINY)
    for name in ("loads.csv", "requests.csv", "travels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "loads.csv").read_bytes() != (tmp_path / "c" / "loads.csv").read_bytes()


def test_gen_respects_start_and_step(tmp_path):
    rc = run(
        "gen", "--out", tmp_path / "d", "--seed", 1, *TINY,
        "--config", "step_seconds=1800",
        "--config", "start=2026-06-01T00:00:00",
    )
    assert rc == 0
    scenario, _ = load_dataset(tmp_path / "d")
    assert scenario.timebase.step_seconds == 1800
    assert scenario.timebase.n_steps == 4 * 48
    assert scenario.timebase.start.isoformat() == "2026-06-01T00:00:00"


@pytest.mark.parametrize(
    "entry",
    ["quantity=3", "households=many", "start=not-a-date", "households"],
)
def test_gen_rejects_bad_config(tmp_path, entry):
    assert run("gen", "--out", tmp_path / "x", "--config", entry) == 2


def test_parse_gen_config():
    cfg = parse_gen_config(["households=5", "charging_share=0.2"])
    assert cfg == {"households": 5, "charging_share": 0.2}
    assert parse_gen_config([]) == {}


def test_train_writes_loadable_params(dataset, trained):
    params = load_params(trained)
    assert params.kind == "nn"
    assert params.input_mode == "a"
    assert params.name == "nn-a+cma"
    assert params.trained_with == "cma"
    # --smoothing was not given, so the weight came out of the tuning grid
    assert params.smoothing in SMOOTHING_GRID
    make_controller(params)  # reconstructs without complaint


def test_train_log_csv(dataset, tmp_path):
    log_path = tmp_path / "progress.csv"
    rc = run(
        "train", "--data", dataset, "--out", tmp_path / "p.json",
        "--iterations", 2, "--popsize", 4, "--workers", 1, "--seed", 3,
        "--log", log_path, "--no-timestamps",
    )
    assert rc == 0
    with open(log_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "best_objective", "sigma_or_step", "evaluations", "wall_seconds"]
    body = rows[1:]
    assert len(body) == 2
    assert [int(r[0]) for r in body] == [1, 2]
    assert all(r[4] == "0.000" for r in body)
    best = [float(r[1]) for r in body]
    assert best[1] <= best[0]


def test_train_fixed_smoothing_skips_tuning(dataset, tmp_path):
    out = tmp_path / "fixed.json"
    rc = run(
        "train", "--data", dataset, "--out", out,
        "--iterations", 1, "--popsize", 4, "--workers", 1, "--seed", 3,
        "--smoothing", 0.25,
    )
    assert rc == 0
    # 0.25 is not on the tuning grid, so seeing it back proves no re-tune ran
    assert load_params(out).smoothing == 0.25


def test_train_esn(dataset, tmp_path):
    out = tmp_path / "esn.json"
    rc = run(
        "train", "--data", dataset, "--out", out,
        "--controller", "esn", "--reservoir-size", 20,
        "--iterations", 1, "--popsize", 4, "--workers", 1, "--seed", 5,
        "--name", "small-esn",
    )
    assert rc == 0
    params = load_params(out)
    assert params.kind == "esn"
    assert params.reservoir_size == 20
    assert params.name == "small-esn"


def test_train_numgrad_clamps_long_window(dataset, tmp_path, caplog):
    # the training split is 48h, shorter than the default 72h window
    with caplog.at_level(logging.WARNING, logger="gridcharge"):
        rc = run(
            "train", "--data", dataset, "--out", tmp_path / "ng.json",
            "--optimizer", "numgrad", "--iterations", 1, "--workers", 1,
            "--seed", 2, "--smoothing", 0.0,
        )
    assert rc == 0
    assert any("clamping" in r.message for r in caplog.records)
    assert load_params(tmp_path / "ng.json").trained_with == "numgrad"


def test_eval_writes_summary_and_run_dirs(dataset, trained, tmp_path):
    out = tmp_path / "report"
    rc = run("eval", "--data", dataset, "--out", out, "--params", trained)
    assert rc == 0
    with open(out / "summary.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["controller", "std_kw", "min_kw", "p2_5_kw", "p97_5_kw", "max_kw"]
    names = [r[0] for r in rows[1:]]
    assert names == ["no_charge", "max_charge", "min_charge", "const_charge", "nn-a+cma", "oracle"]
    for name in names[:-1]:
        run_dir = out / _safe_name(name)
        for artifact in ("loads_out.csv", "metrics.json", "changes.csv"):
            assert (run_dir / artifact).exists()
    oracle_metrics = json.loads((out / "oracle" / "oracle_metrics.json").read_text())
    assert oracle_metrics["converged"] == 1
    assert oracle_metrics["iterations"] >= 0
    stds = {r[0]: float(r[1]) for r in rows[1:]}
    for name in ("max_charge", "min_charge", "const_charge", "nn-a+cma"):
        assert stds["oracle"] <= stds[name] + 1e-9


def test_eval_no_oracle(dataset, tmp_path):
    out = tmp_path / "bare"
    rc = run("eval", "--data", dataset, "--out", out, "--no-oracle")
    assert rc == 0
    with open(out / "summary.csv", newline="") as f:
        names = [r[0] for r in list(csv.reader(f))[1:]]
    assert "oracle" not in names
    assert not (out / "oracle").exists()


def test_eval_unknown_split_falls_back_to_whole_scenario(dataset, tmp_path, caplog):
    out = tmp_path / "whole"
    with caplog.at_level(logging.WARNING, logger="gridcharge"):
        rc = run("eval", "--data", dataset, "--out", out, "--split", "bogus", "--no-oracle")
    assert rc == 0
    assert any("whole scenario" in r.message for r in caplog.records)
    with open(out / "no_charge" / "loads_out.csv", newline="") as f:
        n_rows = sum(1 for _ in f) - 1
    assert n_rows == 4 * 96


def test_eval_duplicate_names_get_distinct_dirs(dataset, trained, tmp_path):
    out = tmp_path / "dup"
    rc = run(
        "eval", "--data", dataset, "--out", out,
        "--params", trained, "--params", trained, "--no-oracle",
    )
    assert rc == 0
    assert (out / "nn-a+cma").is_dir()
    assert (out / "nn-a+cma_2").is_dir()


def test_missing_dataset_exits_3(tmp_path):
    assert run("eval", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 3
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "p.json") == 3


def test_missing_params_file_exits_2(dataset, tmp_path):
    rc = run(
        "eval", "--data", dataset, "--out", tmp_path / "o",
        "--params", tmp_path / "absent.json", "--no-oracle",
    )
    assert rc == 2


def test_default_workers(monkeypatch):
    monkeypatch.delenv("GRIDCHARGE_WORKERS", raising=False)
    assert default_workers() == 1
    monkeypatch.setenv("GRIDCHARGE_WORKERS", "3")
    assert default_workers() == 3
    from gridcharge.errors import ConfigError

    monkeypatch.setenv("GRIDCHARGE_WORKERS", "0")
    with pytest.raises(ConfigError):
        default_workers()
    monkeypatch.setenv("GRIDCHARGE_WORKERS", "lots")
    with pytest.raises(ConfigError):
        default_workers()


def test_safe_name():
    assert _safe_name("nn-a+cma") == "nn-a+cma"
    assert _safe_name("my controller/v2") == "my_controller_v2"
    assert _safe_name("///") == "controller"
