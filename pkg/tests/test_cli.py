import csv
import json
import os

import numpy as np
import pytest

from robustlab import checkpoint, config as config_mod, models
from robustlab.cli import main
from robustlab.errors import ConfigurationError
from robustlab.models import ModelSpec


MICRO = [
    "--data.dataset=digits",
    "--model.depth=10", "--model.width=1", "--model.input=1,8,8",
    "--data.n_train=128", "--data.n_val=48", "--data.n_test=64",
    "--data.batch_size=64", "--data.augment=none",
    "--threat.epsilon=0.1",
    "--attack.steps=2", "--attack.step_size=0.05",
    "--train.epochs=1", "--eval.steps=4", "--eval.step_size=0.05",
    "--eval.steps_scale=0.02", "--eval.restarts_scale=0.2",
    "--seeds=0,1",
]


# --- config machinery ------------------------------------------------------------

def test_defaults_mirror_baseline_recipe():
    cfg = config_mod.default_config()
    assert cfg["schedule.lr"] == 0.1
    assert cfg["train.weight_decay"] == 5e-4
    assert cfg["attack.steps"] == 10
    assert str(cfg["attack.step_size"]) == "2/255"
    assert cfg["schedule.kind"] == "multistep"
    assert cfg["data.batch_size"] == 128
    assert cfg["train.momentum"] == 0.9
    assert cfg.epsilon() == pytest.approx(8 / 255)


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigurationError, match="nope.key"):
        config_mod.load_config(None, ["nope.key=1"])


def test_bad_value_rejected_by_key():
    with pytest.raises(ConfigurationError, match="train.epochs"):
        config_mod.load_config(None, ["train.epochs=soon"])


def test_fraction_values():
    cfg = config_mod.load_config(None, ["threat.epsilon=16/255"])
    assert cfg.epsilon() == pytest.approx(16 / 255)


def test_config_snapshot_round_trip(tmp_path):
    cfg = config_mod.load_config(None, ["loss.outer=trades", "loss.beta=6"])
    path = tmp_path / "c.cfg"
    path.write_text(cfg.snapshot())
    back = config_mod.load_config(str(path))
    assert back["loss.outer"] == "trades"
    assert back["loss.beta"] == 6.0
    assert back.snapshot() == cfg.snapshot()


def test_auto_step_size_rule():
    cfg = config_mod.load_config(None, [
        "attack.step_size=auto", "threat.epsilon=8/255", "attack.steps=2"])
    assert cfg.train_attack().step_size == 5 / 255
    cfg.set("attack.steps", 10)
    assert cfg.train_attack().step_size == 0.007


def test_auto_epsilon_by_input_geometry():
    cfg = config_mod.load_config(None, [
        "threat.epsilon=auto", "model.input=1,28,28"])
    assert cfg.epsilon() == 0.3
    cfg2 = config_mod.load_config(None, ["threat.epsilon=auto"])
    assert cfg2.epsilon() == pytest.approx(8 / 255)


# --- CLI commands -----------------------------------------------------------------

@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("run"))
    rc = main(["train", "--run-dir", run_dir, "--force"] + MICRO)
    assert rc == 0
    return run_dir


def test_train_writes_run_directory(train_run):
    assert os.path.exists(os.path.join(train_run, "best.ckpt"))
    assert os.path.exists(os.path.join(train_run, "config.cfg"))
    assert os.path.exists(os.path.join(train_run, "selection.json"))
    assert os.path.exists(os.path.join(train_run, "seed0", "metrics.jsonl"))
    assert os.path.exists(os.path.join(train_run, "seed1", "metrics.jsonl"))
    with open(os.path.join(train_run, "selection.json")) as f:
        sel = json.load(f)
    accs = [c["robust_val_acc"] for c in sel["candidates"]]
    assert sel["candidates"][sel["winner_seed_index"]]["robust_val_acc"] \
        == max(accs)


def test_train_config_snapshot_round_trips(train_run):
    cfg = config_mod.load_config(os.path.join(train_run, "config.cfg"))
    assert cfg["model.depth"] == 10
    assert cfg["data.n_train"] == 128


def test_train_refuses_overwrite(train_run, capsys):
    rc = main(["train", "--run-dir", train_run] + MICRO)
    assert rc != 0
    err = capsys.readouterr().err
    assert err.startswith("error[run-dir]:")


def test_unknown_override_is_diagnosed(tmp_path, capsys):
    rc = main(["train", "--run-dir", str(tmp_path / "x"),
               "--bogus.key=1"])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error[config]:") and "bogus.key" in err


def test_eval_epsilon_zero_equals_clean(train_run, tmp_path, capsys):
    out = str(tmp_path / "eval0")
    rc = main(["eval", "--checkpoint", os.path.join(train_run, "best.ckpt"),
               "--out", out, "--epsilon", "0",
               "--dataset=digits",
               "--data.n_val=48", "--data.n_test=64",
               "--eval.steps_scale=0.02", "--eval.restarts_scale=0.2",
               "--eval.steps=2"])
    assert rc == 0
    with open(os.path.join(out, "report.json")) as f:
        report = json.load(f)
    assert report["final_robust_accuracy"] == report["clean_accuracy"]
    assert os.path.exists(os.path.join(out, "per_example.csv"))


def test_eval_report_matches_schema(train_run, tmp_path):
    out = str(tmp_path / "eval1")
    rc = main(["eval", "--checkpoint", os.path.join(train_run, "best.ckpt"),
               "--out", out, "--epsilon", "0.1", "--dataset=digits",
               "--data.n_val=48", "--data.n_test=32",
               "--eval.steps_scale=0.02", "--eval.restarts_scale=0.2",
               "--eval.steps=2"])
    assert rc == 0
    jsonschema = pytest.importorskip("jsonschema")
    import importlib.resources as res
    schema = json.loads(
        res.files("robustlab").joinpath("schemas/eval_report.schema.json")
        .read_text())
    with open(os.path.join(out, "report.json")) as f:
        report = json.load(f)
    jsonschema.validate(report, schema)
    cums = [a["cumulative_robust_accuracy"] for a in report["per_attack"]]
    assert all(b <= a for a, b in zip(cums, cums[1:]))


def test_eval_checkpoint_shape_mismatch_diagnosed(train_run, tmp_path, capsys):
    # corrupt a copy of the checkpoint by dropping fc.w columns
    arrays, manifest = checkpoint.load(os.path.join(train_run, "best.ckpt"))
    arrays["fc.w"] = arrays["fc.w"][:, :4]
    bad = str(tmp_path / "bad.ckpt")
    checkpoint.save(bad, arrays, manifest["model_spec"], manifest["seed"])
    rc = main(["eval", "--checkpoint", bad, "--dataset=digits",
               "--out", str(tmp_path / "evalbad")])
    assert rc != 0
    err = capsys.readouterr().err
    assert "fc.w" in err


def test_landscape_cmd(train_run, tmp_path):
    out = str(tmp_path / "land")
    rc = main(["landscape", "--checkpoint",
               os.path.join(train_run, "best.ckpt"),
               "--indices", "0,1", "--grid-n", "11", "--out", out,
               "--dataset=digits", "--epsilon", "0.1",
               "--data.n_val=48", "--data.n_test=64"])
    assert rc == 0
    for idx in (0, 1):
        matrix = os.path.join(out, f"landscape_{idx}.csv")
        sidecar = os.path.join(out, f"landscape_{idx}.json")
        assert os.path.exists(matrix) and os.path.exists(sidecar)
        with open(sidecar) as f:
            side = json.load(f)
        with open(matrix) as f:
            rows = list(csv.reader(f))
        assert len(rows) == 12  # header + 11
        center_row = rows[1 + 5]
        assert float(center_row[1 + 5]) == pytest.approx(side["clean_margin"],
                                                         abs=1e-5)


def test_landscape_default_grid_is_41(train_run, tmp_path):
    out = str(tmp_path / "land41")
    rc = main(["landscape", "--checkpoint",
               os.path.join(train_run, "best.ckpt"),
               "--indices", "0", "--out", out, "--dataset=digits",
               "--epsilon", "0.1", "--data.n_val=48", "--data.n_test=64"])
    assert rc == 0
    with open(os.path.join(out, "landscape_0.csv")) as f:
        rows = list(csv.reader(f))
    assert len(rows) == 42 and len(rows[1]) == 42


@pytest.fixture(scope="module")
def classifier_run(tmp_path_factory):
    # standard training (epsilon 0) long enough to predict all ten classes
    run_dir = str(tmp_path_factory.mktemp("clf"))
    args = ["train", "--run-dir", run_dir, "--force",
            "--data.dataset=digits",
            "--model.depth=10", "--model.width=1", "--model.input=1,8,8",
            "--data.n_train=512", "--data.n_val=48", "--data.n_test=64",
            "--data.batch_size=128", "--data.augment=none",
            "--threat.epsilon=0",
            "--attack.steps=1", "--attack.step_size=0.05",
            "--train.epochs=4", "--eval.steps=1", "--eval.step_size=0.05",
            "--seeds=0,0"]
    assert main(args) == 0
    return run_dir


def test_pseudolabel_cmd(classifier_run, tmp_path):
    out = str(tmp_path / "pseudo.csv")
    args = ["pseudolabel", "--classifier",
            os.path.join(classifier_run, "best.ckpt"),
            "--dataset=digits", "--labeled-size", "200", "--n", "50",
            "--out", out, "--data.n_val=48", "--data.n_test=64"]
    rc = main(args)
    assert rc == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 50
    # growing n keeps earlier selections (nesting)
    out2 = str(tmp_path / "pseudo2.csv")
    rc = main(["pseudolabel", "--classifier",
               os.path.join(classifier_run, "best.ckpt"),
               "--dataset=digits", "--labeled-size", "200", "--n", "100",
               "--out", out2, "--data.n_val=48", "--data.n_test=64"])
    assert rc == 0
    with open(out2) as f:
        rows2 = list(csv.DictReader(f))
    small = {(r["pool_id"], r["predicted_label"]) for r in rows}
    large = {(r["pool_id"], r["predicted_label"]) for r in rows2}
    assert small <= large


def test_train_with_pseudo_stream(classifier_run, tmp_path):
    # end-to-end semi-supervised path: pseudolabel then a ratio batch mix
    out = str(tmp_path / "pseudo.csv")
    assert main(["pseudolabel", "--classifier",
                 os.path.join(classifier_run, "best.ckpt"),
                 "--dataset=digits", "--labeled-size", "200", "--n", "100",
                 "--out", out, "--data.n_val=48", "--data.n_test=64"]) == 0
    run_dir = str(tmp_path / "semi")
    rc = main(["train", "--run-dir", run_dir, "--force",
               "--data.dataset=digits",
               "--model.depth=10", "--model.width=1", "--model.input=1,8,8",
               "--data.n_val=48", "--data.n_test=64",
               "--data.batch_size=64", "--data.augment=none",
               "--data.labeled_size=200", f"--data.pseudo_csv={out}",
               "--data.ratio=5:5",
               "--threat.epsilon=0.05",
               "--attack.steps=1", "--attack.step_size=0.05",
               "--train.epochs=1", "--eval.steps=1", "--eval.step_size=0.05",
               "--seeds=0,0"])
    assert rc == 0
    assert os.path.exists(os.path.join(run_dir, "best.ckpt"))


def test_sweep_cmd(tmp_path, monkeypatch):
    monkeypatch.setenv("ROBUSTLAB_RUN_ROOT", str(tmp_path))
    rc = main(["sweep", "--axis", "attack.steps", "--values", "2,10",
               "--run-dir", str(tmp_path / "sw"),
               "--attack.step_size=auto", "--threat.epsilon=8/255"]
              + [a for a in MICRO if not a.startswith("--attack.")
                 and not a.startswith("--threat.")])
    assert rc == 0
    with open(tmp_path / "sw" / "sweep.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    assert float(rows[0]["train_step_size"]) == pytest.approx(5 / 255)
    assert float(rows[1]["train_step_size"]) == pytest.approx(0.007)
    for row in rows:
        assert 0.0 <= float(row["stacked_robust_accuracy"]) \
            <= float(row["clean_accuracy"]) + 1e-9


def test_sweep_rejects_unknown_axis(tmp_path, capsys):
    rc = main(["sweep", "--axis", "not.a.key", "--values", "1,2",
               "--run-dir", str(tmp_path / "sw2")])
    assert rc != 0
    assert "not.a.key" in capsys.readouterr().err


def test_run_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("ROBUSTLAB_RUN_ROOT", str(tmp_path / "root"))
    rc = main(["train"] + MICRO + ["--force"])
    assert rc == 0
    assert os.path.exists(tmp_path / "root" / "train" / "best.ckpt")
