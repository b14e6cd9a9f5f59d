"""Volume ingestion, slice preprocessing, subject-level splits and synthetic data."""

from .dataset import SliceDataset, preprocess, sample_stream, synthesize
from .slices import (
    N_SLICES,
    SliceSample,
    augment,
    central_slice_indices,
    crop_and_normalize,
    extract_central_slices,
    flip,
    translate,
)
from .splits import TASKS, SplitPlan, StratificationError, binary_label, make_folds, make_split
from .synthetic import SEPARABLE_PROFILES, ClassProfile, generate_synthetic_volume, null_profiles
from .volumes import LABELS, ManifestRow, VolumeRecord, read_manifest, read_volume, write_manifest, write_volume
