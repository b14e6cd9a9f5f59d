"""The desk-scale protocol with the learning rate raised to 1e-3.

Separates "the pipeline cannot learn" from "the contracted learning rate is
too small for 10 epochs": the same data, model, optimizer and budget, with
only the step size changed.
"""

import pytest

from conftest import desk_pipeline


@pytest.mark.slow
def test_separable_profiles_learned_at_higher_lr(desk_root):
    metrics, seconds = desk_pipeline(desk_root, "separable", 1e-3)
    assert metrics["holdout_accuracy_scan"] >= 0.90
    assert metrics["roc_auc"] >= 0.95
    assert seconds < 1800


@pytest.mark.slow
def test_null_profiles_stay_near_chance_at_higher_lr(desk_root):
    metrics, _ = desk_pipeline(desk_root, "null", 1e-3)
    assert 0.35 <= metrics["holdout_accuracy_scan"] <= 0.65
