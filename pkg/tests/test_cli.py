import json

import numpy as np
import pytest

from botkit import attention, cli, verify
from botkit import functional as F
from botkit.cli import RunConfig, main, parse_config_text, resolve_config
from botkit.data import splits


def run(*argv):
    return main([str(a) for a in argv])


# configuration
def test_full_scale_defaults():
    cfg = resolve_config({}, env={})
    assert (cfg.epochs, cfg.folds, cfg.learning_rate, cfg.weight_decay) == (60, 5, 3e-5, 3e-5)
    assert (cfg.input_size, cfg.width_multiplier, cfg.heads, cfg.rho) == (224, 1, 8, 0.05)


def test_precedence_flags_env_file_preset(tmp_path):
    conf = tmp_path / "c.cfg"
    conf.write_text("mode = desk\nepochs = 7\nworkdir = from-file\nseed = 3\n")
    cfg = resolve_config({"seed": 9}, conf, env={"BOTKIT_WORKDIR": "from-env"})
    assert cfg.epochs == 7  # file beats preset
    assert cfg.folds == 2 and cfg.input_size == 32  # preset beats defaults
    assert cfg.workdir == "from-env" and cfg.seed == 9
    assert resolve_config({"workdir": "flag"}, conf, env={"BOTKIT_WORKDIR": "e"}).workdir == "flag"


def test_nested_json_config(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"training": {"epochs": 3}, "optimizer": {"rho": 0.1}}))
    cfg = resolve_config({}, conf, env={})
    assert cfg.epochs == 3 and cfg.rho == 0.1


def test_key_value_comments_and_errors():
    assert parse_config_text("# c\nepochs = 4  # four\n") == {"epochs": "4"}
    with pytest.raises(cli.ConfigError, match="line 1"):
        parse_config_text("epochs 4")


@pytest.mark.parametrize(
    "text,key",
    [("epochs = many", "epochs"), ("bogus_key = 1", "bogus_key"), ("task = AD-vs-XX", "task"), ("batch_size = 1", "batch_size")],
)
def test_config_errors_exit_1_naming_key(tmp_path, capsys, text, key):
    conf = tmp_path / "bad.cfg"
    conf.write_text(text + "\n")
    assert run("train", "--dry-run", "--config", conf) == 1
    assert key in capsys.readouterr().err


def test_dry_run_prints_full_scale_plan(capsys, tmp_path):
    assert run("train", "--dry-run", "--workdir", tmp_path / "w") == 0
    out = capsys.readouterr().out
    doc = json.loads(out[: out.index("}") + 1])
    assert doc["epochs"] == 60 and doc["folds"] == 5
    assert "10 slice models x 5 of 5 folds x 60 epochs" in out
    assert "[112, 56, 28, 14, 7]" in out
    assert not (tmp_path / "w").exists()  # dry run touches nothing


# synth
def test_synth_counts_and_determinism(tmp_path):
    for name in ("a", "b"):
        args = ["synth", "--workdir", tmp_path / name, "--subjects-per-class", 20, "--scans-per-subject", 1, "--volume-size", 16]
        assert run(*args) == 0
    manifest = (tmp_path / "a/data/manifest.csv").read_bytes()
    assert len(manifest.decode().strip().splitlines()) == 41
    assert len(list((tmp_path / "a/data/volumes").iterdir())) == 40
    assert manifest == (tmp_path / "b/data/manifest.csv").read_bytes()


def test_synth_too_few_subjects_exit_2(tmp_path, capsys):
    assert run("synth", "--workdir", tmp_path, "--subjects-per-class", 4) == 2
    assert "cannot stratify" in capsys.readouterr().err


def test_synth_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = run("synth", "--workdir", tmp_path, "--manifest", blocker / "sub" / "manifest.csv", "--subjects-per-class", 10)
    assert code != 0 and "cannot write" in capsys.readouterr().err


# missing artifacts
def test_missing_manifest_exit_3(tmp_path):
    assert run("preprocess", "--workdir", tmp_path) == 3


def test_eval_and_report_without_artifacts_exit_3(tmp_path):
    assert run("eval", "--workdir", tmp_path) == 3
    assert run("report", "--workdir", tmp_path) == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    wd = tmp_path_factory.mktemp("cli")
    assert run("synth", "--workdir", wd, "--subjects-per-class", 10, "--scans-per-subject", 1, "--volume-size", 32) == 0
    assert run("preprocess", "--workdir", wd, "--mode", "desk") == 0
    assert run("train", "--workdir", wd, "--mode", "desk", "--epochs", 1, "--folds", 1, "--learning-rate", 1e-3) == 0
    return wd


def test_pipeline_outputs(trained, capsys):
    assert run("eval", "--workdir", trained, "--mode", "desk") == 0
    out = capsys.readouterr().out
    assert "Holdout accuracy" in out and "Validation accuracy" in out
    for name in ("metrics.json", "roc.csv", "predictions.csv", "models.json", "run.log"):
        assert (trained / name).exists()
    doc = json.loads((trained / "metrics.json").read_text())
    for key in ("precision", "recall", "f1", "roc_auc", "holdout_accuracy_scan", "holdout_accuracy_subject", "validation_accuracy"):
        assert key in doc
    assert doc["tp"] + doc["fp"] + doc["tn"] + doc["fn"] == doc["n_scans"]
    assert len(list((trained / "curves").iterdir())) == 10
    assert run("report", "--workdir", trained) == 0


def test_eval_is_idempotent(trained):
    assert run("eval", "--workdir", trained, "--mode", "desk") == 0
    first = {n: (trained / n).read_bytes() for n in ("metrics.json", "roc.csv", "predictions.csv")}
    assert run("eval", "--workdir", trained, "--mode", "desk") == 0
    assert first == {n: (trained / n).read_bytes() for n in first}


def test_eval_missing_checkpoint_exit_3(trained, capsys):
    ckpt = trained / "models" / "slice_4.botn"
    saved = ckpt.read_bytes()
    ckpt.unlink()
    try:
        assert run("eval", "--workdir", trained, "--mode", "desk") == 3
        assert "slice 4" in capsys.readouterr().err
    finally:
        ckpt.write_bytes(saved)


def test_task_mismatch_is_config_error(trained):
    assert run("eval", "--workdir", trained, "--mode", "desk", "--task", "MCIc-vs-CN") == 1


# verify
def test_verify_green(capsys):
    assert run("verify") == 0
    out = capsys.readouterr().out
    assert f"{len(verify.CHECKS)}/{len(verify.CHECKS)} checks passed" in out
    assert "FAIL" not in out


def _wrong_axis_softmax(original):
    def softmax(x, axis=-1):
        return original(x, axis=0 if axis in (-1, x.ndim - 1) else -1)

    return softmax


def _unscaled_positions(original):
    def relative_logits(q, rh, rw, height, width):
        return original(q, rh, rw, height, width) * np.sqrt(q.shape[-1])

    return relative_logits


def _leaky_split(original):
    def make_split(rows, task, *args, **kwargs):
        plan = original(rows, task, *args, **kwargs)
        plan.train = sorted(plan.train + plan.test[:1])
        return plan

    return make_split


@pytest.mark.parametrize(
    "module,name,mutate,caught_by",
    [
        (F, "softmax", _wrong_axis_softmax, "softmax rows and shift invariance"),
        (attention, "relative_logits", _unscaled_positions, "MHSA vs brute force"),
        (splits, "make_split", _leaky_split, "subject-disjoint splits and streams"),
    ],
    ids=["softmax-axis", "unscaled-b", "leaked-subject"],
)
def test_verify_catches_sabotage(monkeypatch, capsys, module, name, mutate, caught_by):
    monkeypatch.setattr(module, name, mutate(getattr(module, name)))
    assert run("verify") == 4
    failed = [line for line in capsys.readouterr().out.splitlines() if "  FAIL  " in line]
    assert any(line.startswith(caught_by) for line in failed)


def test_verify_single_check(capsys):
    assert run("verify", "--check", "confusion example") == 0
    assert "confusion example" in capsys.readouterr().out


def test_run_config_fields_all_defaulted():
    RunConfig()  # every field has a default
