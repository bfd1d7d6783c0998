import csv
import json

import numpy as np
import pytest

from msupercon import config as C
from msupercon import model as M
from msupercon.cli import main
from msupercon.data import load_manifest
from msupercon.errors import ConfigError

TINY = {
    "seed": 3,
    "data": {"num_samples": {"train": 16, "val": 8, "test": 8}, "image_size": 8, "aux_size": 4},
    "model": {"rep_dim": 8, "proj_hidden": 16, "proj_out": 4, "conv_channels": [4, 4], "classifier_hidden": [8],
              "aux_feature_dim": 3},
    "train": {"epochs_stage1": 2, "epochs_stage2": 2, "batch_size": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def dataset(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


@pytest.fixture
def run_dir(tmp_path, tiny_config, dataset, monkeypatch):
    monkeypatch.setenv("MSCN_DETERMINISTIC", "1")
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out)]) == 0
    return out


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ------------------------------------------------------------------ generate


def test_generate_writes_splits(dataset, capsys):
    for split, n in TINY["data"]["num_samples"].items():
        ds = load_manifest(dataset / split / "manifest.csv")
        assert len(ds) == n and ds[0].image.shape == (3, 8, 8)


def test_generate_prints_counts(tmp_path, tiny_config, capsys):
    main(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "d")])
    out = capsys.readouterr().out
    assert "train: 16 samples, class counts [8, 3, 3, 2]" in out


def test_generate_rerun_byte_identical(tmp_path, tiny_config, dataset):
    again = tmp_path / "again"
    main(["generate", "--config", str(tiny_config), "--out", str(again)])
    assert _tree_bytes(dataset) == _tree_bytes(again)


def test_generate_bad_proportions(tmp_path, tiny_config, capsys):
    code = main(["generate", "--config", str(tiny_config), "--out", str(tmp_path / "x"),
                 "--set", "data.class_proportions=[0.5,0.2,0.1,0.1]"])
    assert code == 2
    assert "class_proportions" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


# --------------------------------------------------------------------- train


def test_train_outputs(run_dir, capsys):
    lines = (run_dir / "report.jsonl").read_text().splitlines()
    records = [json.loads(x) for x in lines]
    assert [(r["stage"], r["epoch"]) for r in records] == [(1, 1), (1, 2), (2, 1), (2, 2)]
    summary = json.loads((run_dir / "summary.json").read_text())
    assert set(summary["final"]) == {"val", "test"}
    params = M.load_checkpoint(run_dir / "model.mscn")
    assert params.config.num_aux == 0 and params.config.image_shape == (3, 8, 8)


def test_train_stage1_only(tmp_path, tiny_config, dataset):
    out = tmp_path / "s1"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out), "--stage1-only"]) == 0
    records = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
    assert [r["stage"] for r in records] == [1, 1]


def test_train_num_aux_flag(tmp_path, tiny_config, dataset):
    out = tmp_path / "a1"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(out), "--num-aux", "1"]) == 0
    assert M.load_checkpoint(out / "model.mscn").config.num_aux == 1


def test_train_accepts_manifest_path(tmp_path, tiny_config, dataset):
    out = tmp_path / "m"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset / "train" / "manifest.csv"),
                 "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["final"] == {}


def test_train_missing_manifest(tmp_path, tiny_config, capsys):
    code = main(["train", "--config", str(tiny_config), "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "manifest" in capsys.readouterr().err


def test_train_divergence_exits_3(tmp_path, tiny_config, dataset, capsys):
    code = main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(tmp_path / "r"),
                 "--set", "train.optimizer_stage2.learning_rate=1e300"])
    assert code == 3
    err = capsys.readouterr().err
    assert "stage 2" in err and "epoch 1" in err and "batch" in err


def test_train_rejects_unknown_key(tmp_path, tiny_config, dataset, capsys):
    code = main(["train", "--config", str(tiny_config), "--data", str(dataset), "--set", "train.warmup=3"])
    assert code == 2
    assert "train.warmup: unknown key" in capsys.readouterr().err


def test_train_deterministic(tmp_path, tiny_config, dataset, run_dir):
    again = tmp_path / "again"
    assert main(["train", "--config", str(tiny_config), "--data", str(dataset), "--out", str(again)]) == 0
    assert _tree_bytes(run_dir) == _tree_bytes(again)


# ---------------------------------------------------------------- eval/embed


def test_eval_report_stable(tmp_path, dataset, run_dir, capsys):
    reports = []
    for k in range(2):
        path = tmp_path / f"eval{k}.json"
        assert main(["eval", "--ckpt", str(run_dir / "model.mscn"), "--data", str(dataset), "--report", str(path)]) == 0
        reports.append(path.read_bytes())
    assert reports[0] == reports[1]
    doc = json.loads(reports[0])
    assert set(doc) == {"accuracy", "per_class_recall", "confusion", "embedding_quality"}
    assert np.asarray(doc["confusion"]).sum() == TINY["data"]["num_samples"]["test"]
    assert f"accuracy {doc['accuracy']:.4f}" in capsys.readouterr().out


def test_eval_corrupt_checkpoint(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.mscn"
    bad.write_bytes(b"definitely not a checkpoint")
    assert main(["eval", "--ckpt", str(bad), "--data", str(dataset)]) == 2
    assert "not an MSCN checkpoint" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, dataset):
    assert main(["eval", "--ckpt", str(tmp_path / "none.mscn"), "--data", str(dataset)]) == 2


def test_embed_csv(tmp_path, dataset, run_dir):
    out = tmp_path / "z.csv"
    assert main(["embed", "--ckpt", str(run_dir / "model.mscn"), "--data", str(dataset), "--split", "val", "--out", str(out)]) == 0
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample_id", "label", "z0", "z1", "z2", "z3"]
    assert len(rows) == 1 + TINY["data"]["num_samples"]["val"]
    z = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    assert np.all(np.abs(np.linalg.norm(z, axis=1) - 1) <= 1e-12)


# ----------------------------------------------------------------- selfcheck


def test_selfcheck_passes(capsys):
    assert main(["selfcheck", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert "all " in out and "FAIL" not in out


def test_selfcheck_detects_perturbed_op(capsys):
    assert main(["selfcheck", "--instances", "3", "--perturb-grad", "matmul"]) == 1
    out = capsys.readouterr().out
    assert "FAIL gradcheck/matmul" in out and "checks failed" in out


def test_selfcheck_unknown_op(capsys):
    assert main(["selfcheck", "--perturb-grad", "nonsense"]) == 2


# -------------------------------------------------------------------- config


def test_config_command_prints_resolved(tiny_config, capsys):
    assert main(["config", "--config", str(tiny_config), "--set", "loss.gamma=0"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["loss"]["gamma"] == 0 and doc["model"]["rep_dim"] == 8
    assert doc["train"]["optimizer_stage1"]["learning_rate"] == 1e-3


def test_defaults_match_dataclasses():
    cfg = C.load_run_config()
    assert cfg.synthetic_spec().num_samples == {"train": 800, "val": 200, "test": 400}
    tc = cfg.train_config()
    assert tc.model.image_shape == (3, 64, 64) and tc.model.num_classes == 4
    assert tc.epochs_stage1 == 15 and tc.loss.gamma == 2.0


def test_num_samples_replaced_wholesale():
    cfg = C.load_run_config(overrides=['data.num_samples={"train": 10}'])
    assert cfg.synthetic_spec().num_samples == {"train": 10}


def test_num_classes_follows_proportions():
    cfg = C.load_run_config(overrides=["data.class_proportions=[0.5,0.5]", "loss.alpha=[0.5,0.5]"])
    assert cfg.train_config().model.num_classes == 2


@pytest.mark.parametrize("assignment, where", [
    ("model.num_aux=3", "model.num_aux"),
    ("train.batch_size=1", "train.batch_size"),
    ("data.separation=0", "data.separation"),
    ("loss.tau=-1", "loss.tau"),
    ("bogus=1", "bogus: unknown key"),
    ("train.optimizer_stage1.kind=rmsprop", "train.optimizer_stage1.kind"),
    ("loss.alpha=[0.5,0.5]", "alpha"),
])
def test_invalid_values_name_path(assignment, where):
    with pytest.raises(ConfigError, match=where):
        C.load_run_config(overrides=[assignment])


def test_override_parsing():
    doc = C.apply_overrides({}, ["a.b=1", "a.c=true", "a.d=text", "a.e=[1, 2]"])
    assert doc == {"a": {"b": 1, "c": True, "d": "text", "e": [1, 2]}}
    with pytest.raises(ConfigError):
        C.apply_overrides({}, ["novalue"])


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        C.load_run_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        C.load_run_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="top level"):
        C.load_run_config(bad)
