"""Ten slice-specific BoTNet models: cross-validated training, voting and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import functional as F
from .botnet import BotNet, BotNet50Config, replicate_channels
from .checkpoint import load_model, save_checkpoint
from .data.dataset import SliceDataset, sample_stream
from .data.splits import SplitPlan
from .metrics import MetricsReport, binary_metrics
from .sam import NonFiniteGradientError, SamConfig, sam_step, AdamState
from .tensor import no_grad

log = logging.getLogger(__name__)

N_MODELS = 10
CURVE_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
STEP_FIELDS = ("epoch", "step", "loss_w", "loss_w_plus_eps", "grad_norm")


class TrainingFailed(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 60
    folds: int = 5  # folds actually trained (<= the plan's fold count)
    batch_size: int = 16
    seed: int = 0
    max_shift: int = 10
    n_translations: int = 1
    workers: int = 1


@dataclass
class SliceModelEntry:
    slice_index: int
    checkpoint: str
    val_accuracy: float
    fold: int
    epoch: int
    sha256: str = ""


@dataclass
class SliceModelSet:
    task: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [e if isinstance(e, SliceModelEntry) else SliceModelEntry(**e) for e in self.entries]

    def validate(self, n_models: int = N_MODELS) -> None:
        idx = sorted(e.slice_index for e in self.entries)
        if idx != list(range(n_models)):
            raise ValueError(f"model set must hold slice models 0..{n_models - 1}, has {idx}")

    def save(self, path) -> None:
        doc = {"task": self.task, "entries": [asdict(e) for e in sorted(self.entries, key=lambda e: e.slice_index)]}
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SliceModelSet":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["task"], doc["entries"])

    def load_models(self, base_dir=None) -> list[BotNet]:
        models = []
        for e in sorted(self.entries, key=lambda e: e.slice_index):
            path = Path(e.checkpoint)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint for slice {e.slice_index}: {path}")
            model, _ = load_model(path)
            models.append(model.eval())
        return models


@dataclass
class PredictionRecord:
    subject_id: str
    scan_id: str
    slice_probs: list
    ensemble_prob: float
    ensemble_label: int
    true_label: int


@dataclass
class FoldResult:
    fold: int
    best_val_acc: float
    best_epoch: int
    best_state: dict | None
    curves: list
    steps: list
    diverged: bool = False


# ---------------------------------------------------------------------- voting
def majority_vote(labels, probs) -> int:
    """Majority of per-model labels; an exact tie goes to mean probability >= 0.5."""
    labels = np.asarray(labels, dtype=int)
    ones = int(labels.sum())
    zeros = len(labels) - ones
    if ones != zeros:
        return int(ones > zeros)
    return int(float(np.mean(probs)) >= 0.5)


def combine(slice_probs) -> tuple[float, int]:
    """(ensemble probability, ensemble label) from per-slice class-1 probabilities."""
    probs = np.asarray(slice_probs, dtype=float)
    labels = (probs > 0.5).astype(int)  # argmax over two classes; exact 0.5 resolves to class 0
    return float(probs.mean()), majority_vote(labels, probs)


# -------------------------------------------------------------------- training
def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _to_input(samples, idx, channels: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([samples[i].pixels for i in idx]).astype(dtype)
    y = np.array([samples[i].label for i in idx], dtype=np.int64)
    return replicate_channels(x, channels), y


def evaluate_model(model: BotNet, samples, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, class-1 probabilities) in eval mode."""
    model.eval()
    losses, probs = [], []
    with no_grad():
        for idx in _batches(len(samples), batch_size, None):
            x, y = _to_input(samples, idx, model.config.in_channels, model.dtype)
            logits = model(x)
            losses.append(F.cross_entropy(logits, y).item() * len(idx))
            probs.append(F.softmax(logits, axis=1).data[:, 1].astype(np.float64))
    p = np.concatenate(probs) if probs else np.zeros(0)
    y = np.array([s.label for s in samples])
    acc = float(np.mean((p > 0.5).astype(int) == y)) if len(y) else 0.0
    return float(np.sum(losses) / max(len(samples), 1)), acc, p


def train_fold(
    dataset: SliceDataset,
    plan: SplitPlan,
    slice_index: int,
    fold: int,
    model_config: BotNet50Config,
    sam_config: SamConfig,
    train_config: TrainConfig,
) -> FoldResult:
    """Train one fresh model on one fold; keep the epoch with the best validation accuracy."""
    seed = train_config.seed
    model = BotNet(model_config, seed=int(np.random.default_rng([seed, slice_index, fold]).integers(2**31)))
    rng = np.random.default_rng([seed, slice_index, fold, 1])
    train_subjects, val_subjects = plan.fold_subjects(fold)
    val_samples = sample_stream(dataset, val_subjects, slice_index, plan.task)
    params = model.parameters()
    state = AdamState.for_params(params)
    result = FoldResult(fold, -1.0, -1, None, [], [])
    step = 0

    for epoch in range(train_config.epochs):
        train_samples = sample_stream(
            dataset, train_subjects, slice_index, plan.task, augment=True, rng=rng,
            max_shift=train_config.max_shift, n_translations=train_config.n_translations,
        )
        model.train()
        seen = correct = 0
        loss_sum = 0.0
        try:
            for idx in _batches(len(train_samples), train_config.batch_size, rng):
                x, y = _to_input(train_samples, idx, model_config.in_channels, model.dtype)
                if len(idx) < 2:
                    continue  # batch norm needs at least two samples
                captured = {}

                def evaluator(perturbed: bool):
                    model.freeze_bn_stats(perturbed)
                    model.zero_grad()
                    logits = model(x)
                    loss = F.cross_entropy(logits, y)
                    loss.backward()
                    if not perturbed:
                        captured["logits"] = logits.data
                    if not np.isfinite(loss.item()):
                        raise NonFiniteGradientError(f"non-finite loss {loss.item()}")
                    return loss.item(), [p.grad for p in params]

                try:
                    report = sam_step(evaluator, params, state, sam_config)
                finally:
                    model.freeze_bn_stats(False)
                step += 1
                result.steps.append((epoch, step, report.loss_w, report.loss_w_plus_eps, report.grad_norm))
                loss_sum += report.loss_w * len(idx)
                correct += int(np.sum(captured["logits"].argmax(axis=1) == y))
                seen += len(idx)
        except NonFiniteGradientError as exc:
            log.warning("slice %d fold %d diverged at epoch %d: %s", slice_index, fold, epoch, exc)
            result.diverged = True
            break
        val_loss, val_acc, _ = evaluate_model(model, val_samples)
        result.curves.append((epoch, loss_sum / max(seen, 1), correct / max(seen, 1), val_loss, val_acc))
        if val_acc > result.best_val_acc:
            result.best_val_acc, result.best_epoch = val_acc, epoch
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
    return result


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def train_slice_model(
    dataset: SliceDataset,
    plan: SplitPlan,
    slice_index: int,
    model_config: BotNet50Config,
    sam_config: SamConfig,
    train_config: TrainConfig,
    out_dir,
) -> SliceModelEntry:
    """All folds for one slice position; writes curves, step logs and the best checkpoint."""
    out_dir = Path(out_dir)
    n_folds = min(train_config.folds, len(plan.folds))
    best: FoldResult | None = None
    for fold in range(n_folds):
        res = train_fold(dataset, plan, slice_index, fold, model_config, sam_config, train_config)
        _write_rows(out_dir / "curves" / str(slice_index) / f"{fold}.csv", CURVE_FIELDS, res.curves)
        _write_rows(out_dir / "logs" / str(slice_index) / f"{fold}.csv", STEP_FIELDS, res.steps)
        if res.best_state is not None and (best is None or res.best_val_acc > best.best_val_acc):
            best = res
    if best is None:
        raise TrainingFailed(f"slice {slice_index}: no fold finished training")

    model = BotNet(model_config)
    model.load_state_dict(best.best_state)
    rel = Path("models") / f"slice_{slice_index}.botn"
    (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        model,
        out_dir / rel,
        {
            "task": plan.task,
            "slice_index": slice_index,
            "fold": best.fold,
            "epoch": best.best_epoch,
            "val_accuracy": f"{best.best_val_acc:.10g}",
            "seed": train_config.seed,
        },
    )
    return SliceModelEntry(slice_index, rel.as_posix(), best.best_val_acc, best.fold, best.best_epoch, _sha256(out_dir / rel))


def _train_job(args):
    return train_slice_model(*args)


def train_slice_models(
    dataset: SliceDataset,
    plan: SplitPlan,
    model_config: BotNet50Config,
    sam_config: SamConfig,
    train_config: TrainConfig,
    out_dir,
    n_models: int = N_MODELS,
) -> SliceModelSet:
    """Train every slice model (optionally in worker processes) and write ``models.json``."""
    if dataset.n_slices < n_models:
        raise ValueError(f"dataset has {dataset.n_slices} slices per scan, need {n_models}")
    if dataset.image_size != model_config.input_size:
        raise ValueError(f"slices are {dataset.image_size}px but the model expects {model_config.input_size}px")
    jobs = [(dataset, plan, i, model_config, sam_config, train_config, out_dir) for i in range(n_models)]
    if train_config.workers > 1:
        with ProcessPoolExecutor(max_workers=train_config.workers) as pool:
            entries = list(pool.map(_train_job, jobs))
    else:
        entries = [_train_job(j) for j in jobs]
    model_set = SliceModelSet(plan.task, entries)
    model_set.save(Path(out_dir) / "models.json")
    return model_set


# ------------------------------------------------------------------ prediction
def ensemble_predict(models, scan_slices, subject_id="", scan_id="", true_label=-1) -> PredictionRecord:
    """Combine the ten slice models' outputs for one scan; ``scan_slices`` is (10, S, S)."""
    scan_slices = np.asarray(scan_slices)
    if scan_slices.shape[0] != len(models) or not np.all(np.isfinite(scan_slices)):
        raise ValueError(f"scan {scan_id!r}: expected {len(models)} finite slices, got {scan_slices.shape[0]}")
    probs = []
    with no_grad():
        for model, sl in zip(models, scan_slices):
            model.eval()
            x = replicate_channels(sl[None].astype(model.dtype), model.config.in_channels)
            probs.append(float(F.softmax(model(x), axis=1).data[0, 1]))
    p, label = combine(probs)
    return PredictionRecord(subject_id, scan_id, probs, p, label, int(true_label))


def predict_subjects(models, dataset: SliceDataset, subjects, task: str) -> tuple[list[PredictionRecord], int]:
    """Ensemble predictions for every complete scan of ``subjects``; also the skipped-scan count."""
    per_model = []
    for i, model in enumerate(models):
        samples = sample_stream(dataset, subjects, i, task)
        _, _, probs = evaluate_model(model, samples)
        per_model.append(probs)
    samples0 = sample_stream(dataset, subjects, 0, task)
    records, skipped = [], 0
    probs = np.stack(per_model, axis=1) if per_model else np.zeros((len(samples0), 0))
    for s, row in zip(samples0, probs):
        if row.shape[0] != N_MODELS or not np.all(np.isfinite(row)):
            skipped += 1
            continue
        p, label = combine(row)
        records.append(PredictionRecord(s.subject_id, s.scan_id, row.tolist(), p, label, s.label))
    return records, skipped


def compute_metrics(records) -> MetricsReport:
    if not records:
        raise ValueError("cannot compute metrics on an empty record set")
    return binary_metrics(
        [r.ensemble_label for r in records],
        [r.true_label for r in records],
        [r.ensemble_prob for r in records],
    )


def subject_level_accuracy(records) -> float:
    """Accuracy after voting each subject's scan labels (ties by mean probability)."""
    by_subject: dict[str, list[PredictionRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)
    hits = 0
    for recs in by_subject.values():
        label = majority_vote([r.ensemble_label for r in recs], [r.ensemble_prob for r in recs])
        hits += int(label == recs[0].true_label)
    return hits / len(by_subject)
