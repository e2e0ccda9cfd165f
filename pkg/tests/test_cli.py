import csv
import json
from dataclasses import asdict

import numpy as np
import pytest

from conftest import TINY_PRETRAIN, TINY_TASK
from sage_lt import cli, trainer
from sage_lt.cli import ExperimentConfig, UsageError, config_hash, ladder_configs, main, metrics_from_row, metrics_row
from sage_lt.trainer import Metrics, train, train_baseline


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    """Config file for a seconds-long run; the foundation cache is shared across tests."""
    root = tmp_path_factory.mktemp("cli")
    flat = {f"task.{k}": v for k, v in asdict(TINY_TASK).items()}
    flat.update({f"pretrain.{k}": v for k, v in asdict(TINY_PRETRAIN).items()})
    flat.update({"train.epochs": 2, "train.batch_size": 32, "train.lr": 0.05,
                 "cache": str(root / "cache")})
    path = root / "tiny.json"
    path.write_text(json.dumps(flat))
    return str(path)


def _run(cmd, tiny_config, out, *extra):
    return main([cmd, "--config", tiny_config, "--out", str(out), *extra], log=lambda m: None)


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_usage_errors_name_the_field(capsys, tmp_path):
    assert main(["run", "--lr", "-1", "--out", str(tmp_path)]) == 1
    assert "lr" in capsys.readouterr().err
    assert main(["run", "--epochs", "two", "--out", str(tmp_path)]) == 1
    assert "train.epochs" in capsys.readouterr().err
    assert main(["run", "--ablate", "sg,bogus", "--out", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err
    assert main(["nope"]) == 1
    assert main(["sweep", "--grid", "depth=1,2", "--out", str(tmp_path)]) == 1


def test_unknown_config_key(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"loss.mue": 0.5}))
    assert main(["run", "--config", str(path)]) == 1
    assert "loss.mue" in capsys.readouterr().err


def test_empty_seed_list_rejected():
    with pytest.raises(UsageError, match="seeds"):
        ExperimentConfig.from_flat({"seeds": ""})


def test_defaults_follow_reference_row():
    cfg = ExperimentConfig.from_flat({})
    lc = cfg.train.loss
    assert (cfg.train.alpha, lc.mu, lc.gamma, lc.lambda1, lc.lambda2, lc.lambda3) == (0.1, 0.5, 0.05, 0.015, 0.015, 0.4)
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.momentum, cfg.train.epochs) == (128, 0.01, 0.9, 10)


def test_flags_override_file(tiny_config):
    args = cli.build_parser().parse_args(["run", "--config", tiny_config, "--mu", "2", "--seed", "3,4"])
    cfg = cli.resolve_config(args)
    assert cfg.train.loss.mu == 2.0 and cfg.seeds == [3, 4]
    assert cfg.task.grid == TINY_TASK.grid and cfg.train.epochs == 2


def test_hash_stable_under_key_order():
    flat = ExperimentConfig.from_flat({"loss.mu": 1.0, "task.beta": 50}).to_flat()
    reordered = dict(reversed(list(flat.items())))
    assert config_hash(flat) == config_hash(reordered)
    assert ExperimentConfig.from_flat(reordered).config_hash() == ExperimentConfig.from_flat(flat).config_hash()
    assert ExperimentConfig.from_flat({**flat, "loss.mu": 2.0}).config_hash() != config_hash(flat)


def test_run_outputs(tiny_config, tmp_path):
    assert _run("run", tiny_config, tmp_path) == 0
    rows = _csv(tmp_path / "metrics.csv")
    assert len(rows) == 2
    assert list(rows[0]) == ["seed", "epoch", "split", "acc_all", "acc_head", "acc_med", "acc_tail", "loss"]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["completed_seeds"] == [0] and summary["aborted"] is None
    assert summary["parameter_counts"]["per_block_formula"] == (5 * 4 + 8 + 4) * 8 + 3 * 4 + 2
    assert summary["config"]["train.epochs"] == 2


def test_run_is_deterministic(tiny_config, tmp_path):
    assert _run("run", tiny_config, tmp_path / "a") == 0
    assert _run("run", tiny_config, tmp_path / "b") == 0
    for name in ("metrics.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_median_is_middle_seed(tiny_config, tmp_path):
    assert _run("run", tiny_config, tmp_path, "--seed", "0,1,2,3,4") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    accs = sorted(v["acc_all"] for v in summary["per_seed"].values())
    assert len(accs) == 5
    assert summary["aggregate"]["acc_all"]["median"] == accs[2]
    assert summary["aggregate"]["acc_all"]["min"] == accs[0]
    assert len(_csv(tmp_path / "metrics.csv")) == 10


def test_csv_round_trip(tiny_config, tmp_path):
    _run("run", tiny_config, tmp_path)
    for row in _csv(tmp_path / "metrics.csv"):
        m = metrics_from_row(row)
        assert metrics_row(m, seed=int(row["seed"])) == row


def test_metrics_row_round_trip_with_absent_group():
    m = Metrics(0.25, acc_head=0.5, acc_med=None, acc_tail=1 / 3, epoch=4, loss=1.2345678901234567)
    back = metrics_from_row(metrics_row(m))
    assert back.row() == m.row()


def test_ablation_rows(tiny_config, tmp_path):
    assert _run("ablation", tiny_config, tmp_path, "--seed", "0,1") == 0
    rows = _csv(tmp_path / "ablation.csv")
    assert len(rows) == 5 * 2 * 2
    first = rows[0]
    assert (first["row"], first["sg"], first["init"], first["cf"], first["fit"]) == ("1", "0", "0", "0", "0")
    assert {r["row"] for r in rows} == {"1", "2", "3", "4", "5"}


def test_ladder_row_one_is_baseline(tiny_bundle, tiny_data):
    tr, te = tiny_data
    base = trainer.TrainConfig(epochs=2, batch_size=32, lr=0.05)
    _, _, row1 = ladder_configs(base)[0]
    assert row1.flags() == {"sg": False, "init": False, "cf": False, "fit": False}
    m1, h1 = train(row1, tiny_bundle, tr, te)
    m2, h2 = train_baseline(row1, tiny_bundle, tr, te)
    assert [h.row() for h in h1] == [h.row() for h in h2]
    for k in m1.psi:
        np.testing.assert_array_equal(m1.psi[k], m2.psi[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_exit_code(tiny_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(trainer, "cosine_lr", lambda step, total, lr0: 1e308 if step else lr0)
    assert _run("run", tiny_config, tmp_path) == 2
    assert "seed 0" in capsys.readouterr().err
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["aborted"] and summary["completed_seeds"] == []


def test_sweep(tiny_config, tmp_path):
    assert _run("sweep", tiny_config, tmp_path, "--grid", "mu=0.5,1", "--grid", "lambda3=0,0.4") == 0
    rows = _csv(tmp_path / "sweep.csv")
    assert [(r["param"], float(r["value"])) for r in rows] == [("mu", 0.5), ("mu", 1.0), ("lambda3", 0.0), ("lambda3", 0.4)]


def test_verify():
    lines = []
    assert main(["verify"], log=lines.append) == 0
    assert lines and all(line.startswith("PASS") for line in lines)


def test_study(tmp_path):
    assert main(["study", "--out", str(tmp_path), "--seed", "0,1"], log=lambda m: None) == 0
    study = json.loads((tmp_path / "study.json").read_text())
    assert set(study["per_seed"]) == {"0", "1"}
    for res in study["per_seed"].values():
        assert res["r"] > 0 and len(res["ratios"]) == 10


def test_attention_command(tiny_config, tmp_path):
    assert _run("attention", tiny_config, tmp_path, "--samples", "2") == 0
    index = json.loads((tmp_path / "attention" / "index.json").read_text())
    assert {e["sample"] for e in index["files"]} == {0, 1}
    assert {e["source"] for e in index["files"]} == {"foundation", "finetuned"}
