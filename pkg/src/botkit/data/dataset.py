"""Preprocessed slice datasets and the sample streams fed to training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .slices import N_SLICES, SliceSample, augment as augment_sample, crop_and_normalize, extract_central_slices
from .splits import binary_label
from .synthetic import DEFAULT_SHAPE, generate_synthetic_volume
from .volumes import ManifestRow, read_manifest, read_volume, write_manifest, write_volume


@dataclass
class SliceDataset:
    """Every scan's central slices: ``pixels`` is (n_scans, k, S, S) in [0, 1]."""

    subject_ids: np.ndarray
    scan_ids: np.ndarray
    labels: np.ndarray
    pixels: np.ndarray

    def __len__(self) -> int:
        return len(self.scan_ids)

    @property
    def n_slices(self) -> int:
        return self.pixels.shape[1]

    @property
    def image_size(self) -> int:
        return self.pixels.shape[2]

    def scan_indices(self, subjects) -> np.ndarray:
        wanted = set(subjects)
        return np.array([i for i, s in enumerate(self.subject_ids) if s in wanted], dtype=int)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                subject_ids=self.subject_ids.astype(str),
                scan_ids=self.scan_ids.astype(str),
                labels=self.labels.astype(str),
                pixels=self.pixels,
            )

    @classmethod
    def load(cls, path) -> "SliceDataset":
        with np.load(path) as z:
            return cls(z["subject_ids"], z["scan_ids"], z["labels"], z["pixels"])


def preprocess(rows, k: int = N_SLICES, target: int = 224) -> SliceDataset:
    """Load each manifest volume, take its ``k`` central coronal slices, crop and min-max them."""
    pixels = np.empty((len(rows), k, target, target), dtype=np.float32)
    for i, row in enumerate(rows):
        vol = read_volume(row.path)
        for j, sl in enumerate(extract_central_slices(vol, k)):
            pixels[i, j] = crop_and_normalize(sl, target)
    return SliceDataset(
        np.array([r.subject_id for r in rows]),
        np.array([r.scan_id for r in rows]),
        np.array([r.label for r in rows]),
        pixels,
    )


def sample_stream(
    dataset: SliceDataset,
    subjects,
    slice_index: int,
    task: str,
    augment: bool = False,
    rng: np.random.Generator | None = None,
    max_shift: int = 10,
    n_translations: int = 1,
) -> list[SliceSample]:
    """Samples of one slice position for the scans of ``subjects``.

    Augmentation is only ever requested for training streams; validation and
    test streams yield exactly one sample per scan.
    """
    if augment and rng is None:
        raise ValueError("augmentation needs an rng")
    out = []
    for i in dataset.scan_indices(subjects):
        s = SliceSample(
            str(dataset.subject_ids[i]),
            str(dataset.scan_ids[i]),
            slice_index,
            dataset.pixels[i, slice_index],
            binary_label(task, str(dataset.labels[i])),
        )
        out.extend(augment_sample(s, rng, max_shift, n_translations) if augment else [s])
    return out


def synthesize(
    out_dir,
    n_subjects: int,
    labels,
    profiles: dict,
    seed: int = 0,
    shape=DEFAULT_SHAPE,
    scans_per_subject: int = 1,
) -> list[ManifestRow]:
    """Write ``n_subjects`` synthetic subjects (split evenly over ``labels``) and a manifest.

    Subject ``i`` has anatomy seeded by ``(seed, i)`` and scan noise by
    ``(seed, i, scan)``, so the output is a pure function of the arguments.
    """
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_subjects):
        label = labels[i % len(labels)]
        subject = f"S{i:04d}"
        for scan in range(scans_per_subject):
            scan_id = f"{subject}-{scan}"
            rec = generate_synthetic_volume(
                profiles[label],
                subject,
                np.random.default_rng([seed, i]),
                shape=shape,
                scan_id=scan_id,
                noise_rng=np.random.default_rng([seed, i, scan]),
            )
            rel = Path("volumes") / f"{scan_id}.vol"
            write_volume(out_dir / rel, rec)
            rows.append(ManifestRow(subject, scan_id, label, rel.as_posix()))
    write_manifest(out_dir / "manifest.csv", rows)
    return read_manifest(out_dir / "manifest.csv")
