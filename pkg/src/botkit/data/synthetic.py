"""Synthetic brain-like volumes with a controllable class signature.

Each volume is a noisy ellipsoidal "brain" with a dark ventricle tube running
along the coronal axis through the centre. Subjects differ in brain radii,
centre offset, tissue brightness and ventricle size; the class profile fixes
the range the ventricle radius is drawn from, so disjoint ranges give a
separable signal and identical ranges give none.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volumes import VolumeRecord

DEFAULT_SHAPE = (64, 64, 64)


@dataclass(frozen=True)
class ClassProfile:
    label: str
    ventricle_radius: tuple = (3.0, 5.0)  # in-plane radius range, voxels at 64^3
    tissue_intensity: float = 1.0
    ventricle_intensity: float = 0.25
    noise_std: float = 0.05


SEPARABLE_PROFILES = {
    "CN": ClassProfile("CN", ventricle_radius=(2.5, 4.5)),
    "AD": ClassProfile("AD", ventricle_radius=(7.0, 9.5)),
    "MCIc": ClassProfile("MCIc", ventricle_radius=(6.0, 8.0)),
    "MCInc": ClassProfile("MCInc", ventricle_radius=(3.0, 5.0)),
}


def null_profiles(labels, radius=(2.5, 9.5)) -> dict[str, ClassProfile]:
    """Identical signatures for every label: no class signal at all."""
    return {lab: ClassProfile(lab, ventricle_radius=radius) for lab in labels}


def subject_anatomy(rng: np.random.Generator, profile: ClassProfile, shape=DEFAULT_SHAPE) -> dict:
    scale = np.asarray(shape, dtype=float) / 64.0
    return {
        "center": np.asarray(shape) / 2.0 + rng.uniform(-1.5, 1.5, size=3) * scale,
        "brain_radii": rng.uniform(25.0, 29.0, size=3) * scale,
        "ventricle_radius": rng.uniform(*profile.ventricle_radius) * scale[0],
        "ventricle_aspect": rng.uniform(0.7, 0.9),
        "tissue_gain": rng.uniform(0.9, 1.1),
        "shading": rng.uniform(-0.1, 0.1, size=3),
    }


def generate_synthetic_volume(
    profile: ClassProfile,
    subject_id: str,
    rng: np.random.Generator,
    shape=DEFAULT_SHAPE,
    scan_id: str | None = None,
    noise_rng: np.random.Generator | None = None,
) -> VolumeRecord:
    """One scan. Anatomy comes from ``rng``; scan noise from ``noise_rng`` (defaults to ``rng``).

    Passing a fresh generator with the same seed as ``rng`` for every scan of
    a subject keeps its anatomy fixed while the noise varies.
    """
    anat = subject_anatomy(rng, profile, shape)
    noise_rng = rng if noise_rng is None else noise_rng
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float32) + 0.5 for n in shape), indexing="ij"))
    rel = grid - anat["center"].reshape(3, 1, 1, 1).astype(np.float32)

    brain = ((rel / anat["brain_radii"].reshape(3, 1, 1, 1)) ** 2).sum(axis=0) <= 1.0
    r = anat["ventricle_radius"]
    vent_radii = np.array([r, 0.45 * shape[1], r * anat["ventricle_aspect"]]).reshape(3, 1, 1, 1)
    ventricle = ((rel / vent_radii) ** 2).sum(axis=0) <= 1.0

    shading = 1.0 + np.tensordot(anat["shading"], rel / np.asarray(shape).reshape(3, 1, 1, 1), axes=1)
    vol = np.where(brain, profile.tissue_intensity * anat["tissue_gain"] * shading, 0.0)
    vol = np.where(ventricle & brain, profile.ventricle_intensity, vol)
    vol = vol + noise_rng.normal(0.0, profile.noise_std, size=shape)
    return VolumeRecord(subject_id, scan_id or f"{subject_id}-0", profile.label, vol.astype(np.float32))
