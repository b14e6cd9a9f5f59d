"""Subject-level train/val/test partitions and stratified cross-validation folds."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = {
    "AD-vs-CN": ("AD", "CN"),
    "MCIc-vs-CN": ("MCIc", "CN"),
    "MCIc-vs-MCInc": ("MCIc", "MCInc"),
}
PLAN_VERSION = 1
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


class StratificationError(ValueError):
    """Too few subjects in a class to build the requested partitions."""


def task_classes(task: str) -> tuple[str, str]:
    """(positive label, negative label); the positive class maps to 1."""
    try:
        return TASKS[task]
    except KeyError:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}") from None


def binary_label(task: str, label: str) -> int:
    pos, neg = task_classes(task)
    if label == pos:
        return 1
    if label == neg:
        return 0
    raise ValueError(f"label {label!r} is not part of task {task}")


@dataclass
class SplitPlan:
    task: str
    seed: int
    ratios: tuple
    train: list
    val: list
    test: list
    folds: list = field(default_factory=list)
    subject_labels: dict = field(default_factory=dict)  # subject -> binary label

    def fold_subjects(self, fold: int) -> tuple[list, list]:
        """(training subjects, validation subjects) for one cross-validation fold."""
        val = list(self.folds[fold])
        held = set(val)
        train = sorted(s for s in self.train + self.val if s not in held)
        return train, val

    def to_json(self) -> str:
        doc = {
            "version": PLAN_VERSION,
            "task": self.task,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": self.train,
            "val": self.val,
            "test": self.test,
            "folds": self.folds,
            "subject_labels": self.subject_labels,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != PLAN_VERSION:
            raise ValueError(f"{path}: unsupported split plan version {doc.get('version')}")
        return cls(
            doc["task"], doc["seed"], tuple(doc["ratios"]), doc["train"], doc["val"], doc["test"],
            doc["folds"], doc["subject_labels"],
        )


def largest_remainder(n: int, ratios) -> list[int]:
    """Integer counts summing to ``n`` proportional to ``ratios`` (ties favour earlier parts)."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"invalid ratios {ratios}")
    exact = n * ratios / ratios.sum()
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    order = sorted(range(len(ratios)), key=lambda i: (-remainder[i], i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def subjects_by_class(rows, task: str) -> dict[int, list[str]]:
    """Binary class -> sorted subject IDs, for manifest rows belonging to ``task``."""
    labels: dict[str, int] = {}
    for r in rows:
        try:
            y = binary_label(task, r.label)
        except ValueError:
            continue
        if labels.setdefault(r.subject_id, y) != y:
            raise ValueError(f"subject {r.subject_id} has scans with conflicting labels")
    out: dict[int, list[str]] = defaultdict(list)
    for s, y in labels.items():
        out[y].append(s)
    return {y: sorted(v) for y, v in out.items()}


def make_split(rows, task: str, ratios=DEFAULT_RATIOS, seed: int = 0, k: int = 5) -> SplitPlan:
    """Shuffle subjects per class and cut them into train/val/test by ``ratios``.

    Scans follow their subject, so no subject appears in two partitions.
    The plan's ``folds`` are filled by :func:`make_folds` with ``k`` groups.
    """
    by_class = subjects_by_class(rows, task)
    pos, neg = task_classes(task)
    for y, name in ((1, pos), (0, neg)):
        n = len(by_class.get(y, []))
        if n < k:
            raise StratificationError(f"cannot stratify: class {name} has {n} subjects, need at least {k}")
    rng = np.random.default_rng(seed)
    train, val, test, subject_labels = [], [], [], {}
    for y in (1, 0):
        subjects = [by_class[y][i] for i in rng.permutation(len(by_class[y]))]
        n_train, n_val, _ = largest_remainder(len(subjects), ratios)
        train += subjects[:n_train]
        val += subjects[n_train : n_train + n_val]
        test += subjects[n_train + n_val :]
        subject_labels.update({s: y for s in subjects})
    plan = SplitPlan(task, seed, tuple(ratios), sorted(train), sorted(val), sorted(test), [], subject_labels)
    plan.folds = make_folds(plan, k)
    return plan


def make_folds(plan: SplitPlan, k: int = 5) -> list[list[str]]:
    """Partition train+val subjects into ``k`` class-stratified groups."""
    pool = plan.train + plan.val
    rng = np.random.default_rng([plan.seed, 1])
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for y in (1, 0):
        members = sorted(s for s in pool if plan.subject_labels[s] == y)
        if len(members) < k:
            raise StratificationError(f"cannot stratify: class {y} has {len(members)} subjects for {k} folds")
        for pos, i in enumerate(rng.permutation(len(members))):
            folds[(offset + pos) % k].append(members[i])
        offset += len(members)
    return [sorted(f) for f in folds]
