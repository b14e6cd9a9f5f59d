"""Sharpness-aware minimisation around an Adam base optimiser.

Each step evaluates the gradient at ``w``, moves to ``w + eps`` with
``eps = rho * g / ||g||`` (norm over all parameters jointly), re-evaluates the
gradient there, restores ``w`` and lets Adam apply the second gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the step was rejected."""


@dataclass
class AdamConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SamConfig:
    rho: float = 0.05
    base: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        arrays = [_array(p) for p in params]
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


@dataclass
class StepReport:
    loss_w: float
    loss_w_plus_eps: float
    grad_norm: float
    perturbed: bool
    eps_norm: float = 0.0


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def _check_finite(grads) -> None:
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter #{i}")


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None)))


def perturb(params, grads, rho: float) -> tuple[list[np.ndarray], float]:
    """Ascent offsets ``rho * g / ||g||`` (in float64) and the joint gradient norm.

    Parameters are shifted in place to ``w + eps``. An all-zero gradient gives
    ``eps = 0`` and leaves parameters untouched.
    """
    norm = global_norm(grads)
    offsets = []
    for p, g in zip(params, grads):
        arr = _array(p)
        if g is None or norm == 0.0:
            offsets.append(np.zeros(arr.shape, dtype=np.float64))
            continue
        e = (rho / norm) * np.asarray(g, dtype=np.float64)
        offsets.append(e)
        arr += e.astype(arr.dtype, copy=False)
    return offsets, norm


def adam_step(state: AdamState, params, grads, config: AdamConfig) -> None:
    """One Adam update with decoupled weight decay, in place.

    Rejects the whole step (nothing modified) if any gradient is non-finite.
    """
    if len(state.m) != len(params):
        raise ValueError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)} parameters")
    _check_finite(grads)
    for i, p in enumerate(params):
        if state.m[i].shape != _array(p).shape:
            raise ValueError(f"state shape {state.m[i].shape} != parameter #{i} shape {_array(p).shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    lr, wd = config.learning_rate, config.weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        w = _array(p)
        if wd:
            w -= (lr * wd) * w
        if g is None:
            continue
        m *= config.beta1
        m += (1 - config.beta1) * g
        v *= config.beta2
        v += (1 - config.beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(w.dtype, copy=False)


def sam_step(
    evaluator: Callable[..., tuple[float, Sequence[np.ndarray]]],
    params,
    state: AdamState,
    config: SamConfig,
) -> StepReport:
    """Two-pass SAM update.

    ``evaluator(perturbed=...)`` must return ``(loss, grads)`` at the current
    parameter values; it is called exactly twice, first with
    ``perturbed=False`` and then at ``w + eps`` with ``perturbed=True``.
    On any failure the parameters are restored to their pre-step values.
    """
    saved = [_array(p).copy() for p in params]

    def restore():
        for p, s in zip(params, saved):
            _array(p)[...] = s

    try:
        loss_w, grads = evaluator(perturbed=False)
        grads = [None if g is None else np.array(g) for g in grads]
        _check_finite(grads)
        offsets, norm = perturb(params, grads, config.rho)
        perturbed = norm > 0.0
        eps_norm = global_norm(offsets)
        if perturbed and abs(eps_norm - config.rho) > 1e-12 * max(1.0, config.rho):
            raise AssertionError(f"perturbation norm {eps_norm!r} != rho {config.rho!r}")
        loss_eps, grads_eps = evaluator(perturbed=True)
        grads_eps = [None if g is None else np.array(g) for g in grads_eps]
        restore()
        adam_step(state, params, grads_eps, config.base)
    except BaseException:
        restore()
        raise
    return StepReport(float(loss_w), float(loss_eps), norm, perturbed, eps_norm)


class SAM:
    """Stateful wrapper: ``SAM(params, config).step(evaluator)``."""

    def __init__(self, params, config: SamConfig | None = None):
        self.params = list(params)
        self.config = config or SamConfig()
        self.state = AdamState.for_params(self.params)

    def step(self, evaluator) -> StepReport:
        return sam_step(evaluator, self.params, self.state, self.config)


class Adam:
    """Plain Adam with the same decoupled decay, for baselines."""

    def __init__(self, params, config: AdamConfig | None = None):
        self.params = list(params)
        self.config = config or AdamConfig()
        self.state = AdamState.for_params(self.params)

    def step(self, grads) -> None:
        adam_step(self.state, self.params, grads, self.config)
