import json

import pytest

from atdfuse.cli import main, params_table
from atdfuse.config import ConfigError, RunConfig

FAST = ["--set", "data.n=80", "--set", "model.d_model=8", "--set", "model.d_fused=8",
        "--set", "model.n_blocks=1"]


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.ini")]) == 2
    assert "config not found" in capsys.readouterr().err


def test_unknown_config_key_named(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[model]\nd_modle = 8\n")
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "model.d_modle" in capsys.readouterr().err


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--fusion", "atd", "--task", "synthetic-xor", "--epochs", "2",
                 "--out", str(out), *FAST])
    assert code == 0
    records = read_jsonl(out / "metrics.jsonl")
    assert any(r["metric"] == "accuracy" for r in records)
    assert {"epoch", "split", "metric", "value", "config_hash"} <= records[0].keys()
    for name in ("checkpoint.npz", "best.npz", "config.ini", "summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config_hash"] == records[0]["config_hash"]


def test_written_config_reparses_to_itself(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--epochs", "0", "--out", str(out), *FAST]) == 0
    cfg = RunConfig.load(out / "config.ini")
    assert RunConfig.from_ini(cfg.to_ini()) == cfg
    assert cfg.model.d_model == 8 and cfg.train.out == str(out)


def test_zero_epochs_run(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--epochs", "0", "--out", str(out), *FAST]) == 0
    assert read_jsonl(out / "metrics.jsonl") == []
    assert (out / "checkpoint.npz").exists()


def test_eval_round_trip(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--epochs", "1", "--out", str(out), *FAST]) == 0
    assert main(["eval", "--checkpoint", str(out / "best.npz"), "--split", "val"]) == 0
    a = json.loads((out / "eval_val.json").read_text())
    assert main(["eval", "--checkpoint", str(out / "best.npz"), "--split", "val"]) == 0
    assert json.loads((out / "eval_val.json").read_text()) == a
    assert "accuracy" in a["metrics"]


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.npz")]) == 2


def test_ablate_rows_and_hashes(tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--variants", "atd,lmf", "--seeds", "1", "--epochs", "1",
                 "--out", str(out), *FAST])
    assert code == 0
    payload = json.loads((out / "ablation.json").read_text())
    assert len(payload["rows"]) == 2
    assert all(len(r["config_hash"]) == 16 for r in payload["rows"])
    assert payload["rows"][0]["config_hash"] != payload["rows"][1]["config_hash"]
    assert "atd" in capsys.readouterr().out


def test_ablate_unimodal_rows(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--variants", "atd", "--modalities", "both,1,2", "--seed-list", "3",
                 "--epochs", "1", "--out", str(out), *FAST]) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [(r["fusion"], r["modality"]) for r in rows] == [("atd", "both"), ("none", "1"),
                                                            ("none", "2")]
    assert rows[0]["seeds"] == [3]


def test_ablate_failed_cell_is_recorded(tmp_path):
    out = tmp_path / "abl"
    # a 1-sample training split makes every cell fail
    code = main(["ablate", "--variants", "atd", "--epochs", "1", "--out", str(out),
                 "--set", "data.n=2", "--set", "data.split_train=0.5", "--set",
                 "data.split_val=0.0", "--set", "data.split_test=0.5"])
    assert code == 1
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert rows[0]["errors"]


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--only", "matmul,softmax,atd_fuse"]) == 0
    assert "3/3 passed" in capsys.readouterr().out


def test_gradcheck_fails_at_impossible_tolerance():
    assert main(["gradcheck", "--only", "softmax", "--tol", "1e-15"]) == 1


def test_gradcheck_registry_nonempty():
    from atdfuse.checks import REGISTRY

    assert len(REGISTRY) > 20
    assert {"model_atd_b2", "atd_fuse", "lmf_fuse", "cross_attention_fuse"} <= REGISTRY.keys()


def test_params_table(tmp_path, capsys):
    assert main(["params", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "fusion-only" in text and "total" in text
    counts = json.loads((tmp_path / "params.json").read_text())["counts"]
    for c in counts.values():
        assert c["total"] == sum(v for k, v in c.items() if k != "total")


def test_params_direction_at_default_config():
    counts = params_table(RunConfig())
    atd, lmf, ca = (counts[v]["total"] for v in ("atd", "lmf", "cross_attention"))
    assert ca > atd
    assert abs(atd - lmf) / atd < 0.25


def test_bad_set_syntax():
    assert main(["params", "--set", "model.d_model"]) == 2


def test_config_value_validation():
    with pytest.raises(ConfigError, match="model.fusion"):
        RunConfig().with_overrides({"model.fusion": "gated"})
