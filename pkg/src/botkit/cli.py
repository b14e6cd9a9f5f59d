"""``botkit``: synthesize, preprocess, train, eval, verify, report.

Work directory layout (all paths relative to ``--workdir``)::

    data/manifest.csv, data/volumes/*.vol   synth
    slices.npz, split.json                  preprocess
    models/, curves/, logs/, models.json    train
    metrics.json, roc.csv, predictions.csv  eval
    run.log                                 every command (the only timestamped file)

Exit codes: 0 ok, 1 configuration error, 2 data precondition, 3 missing
artifact, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_VERIFY = 0, 1, 2, 3, 4
log = logging.getLogger("botkit")
log.addHandler(logging.NullHandler())


class CliError(Exception):
    code = EXIT_CONFIG


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataError(CliError):
    code = EXIT_DATA


class MissingArtifact(CliError):
    code = EXIT_MISSING


@dataclass
class RunConfig:
    """Every knob of a run. Defaults are the full-scale values."""

    mode: str = "paper"
    task: str = "AD-vs-CN"
    workdir: str = "botkit-run"
    manifest: str = ""  # defaults to <workdir>/data/manifest.csv
    # model
    width_multiplier: Fraction = Fraction(1)
    input_size: int = 224
    heads: int = 8
    dtype: str = "float32"
    # training
    epochs: int = 60
    folds: int = 5
    k_folds: int = 5
    batch_size: int = 16
    seed: int = 0
    workers: int = 1
    max_shift: int = 10
    n_translations: int = 1
    # optimizer
    rho: float = 0.05
    learning_rate: float = 3e-5
    weight_decay: float = 3e-5
    # synthetic data
    subjects_per_class: int = 40
    scans_per_subject: int = 2
    profiles: str = "separable"
    volume_size: int = 64


PRESETS = {
    "paper": {},
    "desk": {
        "width_multiplier": Fraction(1, 8),
        "input_size": 32,
        "epochs": 5,
        "folds": 2,
    },
}


def _coerce(name: str, raw):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if ftype in ("Fraction", Fraction):
            return Fraction(str(raw))
        if ftype in ("int", int):
            if isinstance(raw, float) or (isinstance(raw, str) and not raw.strip().lstrip("-").isdigit()):
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        return str(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from None


def _flatten(doc, out=None):
    out = {} if out is None else out
    for key, value in doc.items():
        if isinstance(value, dict):
            _flatten(value, out)
        else:
            out[key] = value
    return out


def parse_config_text(text: str) -> dict:
    """A JSON document (nesting allowed, leaf keys used) or ``key = value`` lines."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config document is not valid JSON: {exc}") from None
        return _flatten(doc)
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(flags: dict, config_path=None, env=None) -> RunConfig:
    """flags > BOTKIT_WORKDIR > config file > preset > defaults."""
    env = os.environ if env is None else env
    known = {f.name for f in fields(RunConfig)}
    file_values = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        file_values = parse_config_text(path.read_text(encoding="utf-8"))
        for key in file_values:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
    mode = flags.get("mode") or file_values.get("mode") or "paper"
    if mode not in PRESETS:
        raise ConfigError(f"config key 'mode': expected one of {sorted(PRESETS)}, got {mode!r}")
    values = dict(PRESETS[mode])
    values.update({k: _coerce(k, v) for k, v in file_values.items()})
    if env.get("BOTKIT_WORKDIR"):
        values["workdir"] = env["BOTKIT_WORKDIR"]
    values.update({k: _coerce(k, v) for k, v in flags.items() if v is not None and k in known})
    values["mode"] = mode
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    from .data.splits import TASKS

    if cfg.task not in TASKS:
        raise ConfigError(f"config key 'task': expected one of {sorted(TASKS)}, got {cfg.task!r}")
    if cfg.profiles not in ("separable", "null"):
        raise ConfigError(f"config key 'profiles': expected separable or null, got {cfg.profiles!r}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"config key 'dtype': expected float32 or float64, got {cfg.dtype!r}")
    for key in ("epochs", "folds", "k_folds", "batch_size", "workers", "input_size", "heads", "scans_per_subject", "volume_size"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"config key {key!r} must be positive, got {getattr(cfg, key)}")
    if cfg.folds > cfg.k_folds:
        raise ConfigError(f"config key 'folds': cannot train {cfg.folds} of {cfg.k_folds} folds")
    if cfg.batch_size < 2:
        raise ConfigError("config key 'batch_size' must be at least 2 (batch normalisation)")
    if cfg.rho < 0:
        raise ConfigError(f"config key 'rho' must be >= 0, got {cfg.rho}")
    if cfg.input_size % 32:
        raise ConfigError(f"config key 'input_size' must be divisible by 32, got {cfg.input_size}")
    if cfg.volume_size < 10:
        raise ConfigError(f"config key 'volume_size' must be at least 10, got {cfg.volume_size}")


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["width_multiplier"] = str(cfg.width_multiplier)
    return d


def model_config(cfg: RunConfig):
    from .botnet import BotNet50Config

    try:
        return BotNet50Config(
            input_size=cfg.input_size, width_multiplier=cfg.width_multiplier, heads=cfg.heads, dtype=cfg.dtype
        )
    except ValueError as exc:
        raise ConfigError(f"model configuration: {exc}") from None


def sam_config(cfg: RunConfig):
    from .sam import AdamConfig, SamConfig

    return SamConfig(rho=cfg.rho, base=AdamConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay))


def train_config(cfg: RunConfig):
    from .ensemble import TrainConfig

    return TrainConfig(
        epochs=cfg.epochs, folds=cfg.folds, batch_size=cfg.batch_size, seed=cfg.seed,
        max_shift=cfg.max_shift, n_translations=cfg.n_translations, workers=cfg.workers,
    )


# ------------------------------------------------------------------- commands
def _workdir(cfg) -> Path:
    return Path(cfg.workdir)


def _manifest_path(cfg) -> Path:
    return Path(cfg.manifest) if cfg.manifest else _workdir(cfg) / "data" / "manifest.csv"


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def cmd_synth(cfg: RunConfig) -> int:
    from .data.dataset import synthesize
    from .data.splits import task_classes
    from .data.synthetic import SEPARABLE_PROFILES, null_profiles

    n = cfg.subjects_per_class
    if n < cfg.k_folds:
        raise DataError(f"cannot stratify: {n} subjects per class, need at least {cfg.k_folds} for {cfg.k_folds} folds")
    if n < 10:
        raise DataError(f"synth needs at least 10 subjects per class, got {n}")
    pos, neg = task_classes(cfg.task)
    labels = (pos, neg)
    profiles = SEPARABLE_PROFILES if cfg.profiles == "separable" else null_profiles(labels)
    out = Path(cfg.manifest).parent if cfg.manifest else _workdir(cfg) / "data"
    try:
        rows = synthesize(
            out, 2 * n, labels, profiles, seed=cfg.seed, shape=(cfg.volume_size,) * 3, scans_per_subject=cfg.scans_per_subject
        )
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from None
    print(f"wrote {len(rows)} scans of {2 * n} subjects ({cfg.profiles} profiles) to {out}")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig) -> int:
    from .data.dataset import preprocess
    from .data.splits import StratificationError, make_split
    from .data.volumes import VolumeFormatError, read_manifest

    manifest = _require(_manifest_path(cfg), "manifest")
    try:
        rows = read_manifest(manifest)
        plan = make_split(rows, cfg.task, seed=cfg.seed, k=cfg.k_folds)
        keep = set(plan.train) | set(plan.val) | set(plan.test)
        rows = [r for r in rows if r.subject_id in keep]
        ds = preprocess(rows, 10, cfg.input_size)
    except StratificationError as exc:
        raise DataError(str(exc)) from None
    except FileNotFoundError as exc:
        raise MissingArtifact(f"missing volume: {exc.filename}") from None
    except (VolumeFormatError, ValueError) as exc:
        raise DataError(str(exc)) from None
    wd = _workdir(cfg)
    wd.mkdir(parents=True, exist_ok=True)
    ds.save(wd / "slices.npz")
    plan.save(wd / "split.json")
    print(
        f"{len(ds)} scans -> {ds.n_slices} slices of {ds.image_size}x{ds.image_size}; "
        f"subjects train/val/test {len(plan.train)}/{len(plan.val)}/{len(plan.test)}, {len(plan.folds)} folds"
    )
    return EXIT_OK


def _load_inputs(cfg):
    from .data.dataset import SliceDataset
    from .data.splits import SplitPlan

    wd = _workdir(cfg)
    ds = SliceDataset.load(_require(wd / "slices.npz", "preprocessed slices (run preprocess)"))
    plan = SplitPlan.load(_require(wd / "split.json", "split plan (run preprocess)"))
    if plan.task != cfg.task:
        raise ConfigError(f"config key 'task' is {cfg.task!r} but split.json was built for {plan.task!r}")
    return ds, plan


def training_plan(cfg: RunConfig) -> str:
    mc = model_config(cfg)
    lines = [
        f"task {cfg.task}, mode {cfg.mode}",
        f"model BoTNet-50, width {cfg.width_multiplier}, input {cfg.input_size}x{cfg.input_size}, "
        f"stages {mc.stage_sizes()}, {cfg.heads} heads, {cfg.dtype}",
        f"optimizer SAM(rho={cfg.rho}) over Adam(lr={cfg.learning_rate}, weight decay={cfg.weight_decay})",
        f"10 slice models x {cfg.folds} of {cfg.k_folds} folds x {cfg.epochs} epochs, batch {cfg.batch_size}, seed {cfg.seed}",
        f"{10 * cfg.folds} fold runs, {10 * cfg.folds * cfg.epochs} epochs in total, {cfg.workers} worker(s)",
    ]
    return "\n".join(lines)


def cmd_train(cfg: RunConfig, dry_run: bool = False) -> int:
    from .ensemble import TrainingFailed, train_slice_models

    if dry_run:
        print(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True))
        print(training_plan(cfg))
        return EXIT_OK
    ds, plan = _load_inputs(cfg)
    if ds.image_size != cfg.input_size:
        raise ConfigError(f"config key 'input_size' is {cfg.input_size} but slices are {ds.image_size}px")
    log.info("training: %s", training_plan(cfg).replace("\n", "; "))
    try:
        model_set = train_slice_models(ds, plan, model_config(cfg), sam_config(cfg), train_config(cfg), _workdir(cfg))
    except TrainingFailed as exc:
        raise DataError(str(exc)) from None
    for e in model_set.entries:
        print(f"slice {e.slice_index}: best val acc {e.val_accuracy:.4f} (fold {e.fold}, epoch {e.epoch})")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    from .ensemble import SliceModelSet, compute_metrics, predict_subjects, subject_level_accuracy

    ds, plan = _load_inputs(cfg)
    wd = _workdir(cfg)
    model_set = SliceModelSet.load(_require(wd / "models.json", "model set (run train)"))
    try:
        model_set.validate()
        models = model_set.load_models(wd)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None
    except ValueError as exc:
        raise MissingArtifact(f"incomplete model set: {exc}") from None
    records, skipped = predict_subjects(models, ds, plan.test, plan.task)
    if not records:
        raise DataError("no complete test scans to evaluate")
    report = compute_metrics(records)
    doc = report.to_dict()
    doc.update(
        task=plan.task,
        n_scans=len(records),
        skipped_scans=skipped,
        holdout_accuracy_scan=report.accuracy,
        holdout_accuracy_subject=subject_level_accuracy(records),
        validation_accuracy=float(np.mean([e.val_accuracy for e in model_set.entries])),
        per_slice_validation_accuracy=[e.val_accuracy for e in sorted(model_set.entries, key=lambda e: e.slice_index)],
    )
    (wd / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(wd / "roc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("fpr", "tpr", "threshold"))
        for (fpr, tpr), thr in zip(report.roc_points, report.roc_thresholds):
            w.writerow((f"{fpr:.10g}", f"{tpr:.10g}", "inf" if not np.isfinite(thr) else f"{thr:.10g}"))
    with open(wd / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "scan_id"] + [f"p_slice{i}" for i in range(10)] + ["ensemble_prob", "ensemble_label", "true_label"])
        for r in records:
            w.writerow(
                [r.subject_id, r.scan_id] + [f"{p:.10g}" for p in r.slice_probs]
                + [f"{r.ensemble_prob:.10g}", r.ensemble_label, r.true_label]
            )
    print(format_report(doc))
    return EXIT_OK


def format_report(doc: dict) -> str:
    cols = ("Precision", "Recall", "F1 score", "ROC-AUC", "Holdout accuracy", "Validation accuracy")
    vals = (
        doc["precision"], doc["recall"], doc["f1"], doc["roc_auc"], doc["holdout_accuracy_scan"], doc["validation_accuracy"]
    )
    lines = [
        "Classification  " + "  ".join(f"{c:>19}" for c in cols),
        f"{doc['task']:<14}  " + "  ".join(f"{v:>19.4f}" for v in vals),
        f"holdout accuracy by subject {doc['holdout_accuracy_subject']:.4f}; "
        f"{doc['n_scans']} scans (TP {doc['tp']}, FP {doc['fp']}, TN {doc['tn']}, FN {doc['fn']}), {doc['skipped_scans']} skipped",
    ]
    lines += [f"note: {f}" for f in doc.get("flags", [])]
    return "\n".join(lines)


def cmd_report(cfg: RunConfig) -> int:
    path = _require(_workdir(cfg) / "metrics.json", "metrics (run eval)")
    print(format_report(json.loads(path.read_text(encoding="utf-8"))))
    return EXIT_OK


def cmd_verify(cfg: RunConfig | None = None, names=None) -> int:
    from . import verify

    results = verify.run_checks(names)
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


# ----------------------------------------------------------------------- main
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="botkit", description="BoTNet slice-ensemble pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value or JSON configuration file")
        sp.add_argument("--mode", choices=sorted(PRESETS), help="preset (default paper)")
        sp.add_argument("--workdir")
        sp.add_argument("--task")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--manifest")
        return sp

    s = common(sub.add_parser("synth", help="write synthetic volumes and a manifest"))
    s.add_argument("--subjects-per-class", type=int, dest="subjects_per_class")
    s.add_argument("--scans-per-subject", type=int, dest="scans_per_subject")
    s.add_argument("--profiles", choices=("separable", "null"))
    s.add_argument("--volume-size", type=int, dest="volume_size")

    s = common(sub.add_parser("preprocess", help="extract slices and build the subject split"))
    s.add_argument("--input-size", type=int, dest="input_size")
    s.add_argument("--k-folds", type=int, dest="k_folds")

    s = common(sub.add_parser("train", help="train the ten slice models"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--batch-size", type=int, dest="batch_size")
    s.add_argument("--width-multiplier", dest="width_multiplier")
    s.add_argument("--input-size", type=int, dest="input_size")
    s.add_argument("--rho", type=float)
    s.add_argument("--learning-rate", type=float, dest="learning_rate")
    s.add_argument("--weight-decay", type=float, dest="weight_decay")
    s.add_argument("--workers", type=int)
    s.add_argument("--dtype", choices=("float32", "float64"))
    s.add_argument("--dry-run", action="store_true", help="print the resolved config and training plan only")

    common(sub.add_parser("eval", help="ensemble the slice models on the holdout subjects"))
    common(sub.add_parser("report", help="print the metrics table of a finished eval"))
    s = sub.add_parser("verify", help="run the invariant battery")
    s.add_argument("--check", action="append", help="run only the named check (repeatable)")
    return p


def _setup_log(workdir: Path) -> logging.Handler | None:
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(workdir / "run.log", encoding="utf-8")
    except OSError:
        return None
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("botkit")
    root.setLevel(logging.INFO)
    root.addHandler(handler)
    return handler


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        return cmd_verify(names=args.check)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "dry_run")}
    handler = None
    try:
        cfg = resolve_config(flags, args.config)
        if args.command != "train" or not args.dry_run:
            handler = _setup_log(_workdir(cfg))
            log.info("%s %s", args.command, json.dumps(config_to_dict(cfg), sort_keys=True))
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg, dry_run=args.dry_run)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_report(cfg)
    except CliError as exc:
        log.error("%s", exc)
        print(f"botkit {args.command}: {exc}", file=sys.stderr)
        return exc.code
    finally:
        if handler is not None:
            logging.getLogger("botkit").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
