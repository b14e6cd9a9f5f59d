"""Volume -> normalised 2-D coronal slices, plus training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .volumes import VolumeRecord

N_SLICES = 10
MAX_SHIFT = 10


@dataclass
class SliceSample:
    subject_id: str
    scan_id: str
    slice_index: int
    pixels: np.ndarray  # (S, S), values in [0, 1]
    label: int


def central_slice_indices(depth: int, k: int = N_SLICES) -> range:
    """``floor(D/2) - floor(k/2)`` .. ``floor(D/2) + ceil(k/2) - 1``."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if depth < k:
        raise ValueError(f"coronal extent {depth} is smaller than the {k} slices requested")
    start = depth // 2 - k // 2
    return range(start, start + k)


def extract_central_slices(volume: VolumeRecord, k: int = N_SLICES) -> list[np.ndarray]:
    """The ``k`` central coronal slices, each oriented (axial rows, sagittal columns)."""
    idx = central_slice_indices(volume.voxels.shape[1], k)
    return [np.ascontiguousarray(volume.voxels[:, i, :].T) for i in idx]


def center_crop_or_pad(img: np.ndarray, target: int) -> np.ndarray:
    """Centre crop each axis to ``target``; axes shorter than that are zero-padded, centred."""
    out = img
    for axis in (0, 1):
        n = out.shape[axis]
        if n >= target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        else:
            before = (target - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad)
    return out


def min_max(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def crop_and_normalize(img: np.ndarray, target: int = 224) -> np.ndarray:
    return min_max(center_crop_or_pad(np.asarray(img, dtype=np.float64), target))


def flip(pixels: np.ndarray) -> np.ndarray:
    """Mirror along the sagittal (left-right, column) axis."""
    return pixels[:, ::-1].copy()


def translate(pixels: np.ndarray, shift: int) -> np.ndarray:
    """Shift columns by ``shift`` pixels (positive = right) with zero fill."""
    out = np.zeros_like(pixels)
    if shift > 0:
        out[:, shift:] = pixels[:, :-shift]
    elif shift < 0:
        out[:, :shift] = pixels[:, -shift:]
    else:
        out[...] = pixels
    return out


def augment(sample: SliceSample, rng: np.random.Generator, max_shift: int = MAX_SHIFT, n_translations: int = 1) -> list[SliceSample]:
    """Original, its left-right mirror, and ``n_translations`` horizontally shifted copies.

    Shifts are drawn uniformly from {-max_shift..-1, 1..max_shift}.
    """
    out = [sample, replace(sample, pixels=flip(sample.pixels))]
    for _ in range(n_translations):
        magnitude = int(rng.integers(1, max_shift + 1))
        sign = 1 if rng.random() < 0.5 else -1
        out.append(replace(sample, pixels=translate(sample.pixels, sign * magnitude)))
    return out
