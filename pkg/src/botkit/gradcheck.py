"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h for each selected flat index of ``point``.

    ``f`` is called as ``f(point)`` with ``point.data`` modified in place; a
    closure that ignores its argument but reads ``point`` also works.
    """
    flat = point.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(f(point).data.sum())
        flat[i] = orig - h
        minus = float(f(point).data.sum())
        flat[i] = orig
        out[k] = (plus - minus) / (2 * h)
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> float:
    """Max relative error between the analytic and numerical gradient.

    The relative error of one element is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps exactly-zero gradients from dividing by zero. When
    ``max_checks`` is given only that many randomly chosen elements are
    probed (the analytic gradient is still computed in full).
    """
    if not point.requires_grad:
        raise ValueError("grad_check point must have requires_grad=True")
    point.grad = None
    out = f(point)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

    if max_checks is not None and max_checks < analytic.size:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(analytic.size, size=max_checks, replace=False))
    else:
        indices = np.arange(analytic.size)
    numeric = numerical_grad(f, point, h, list(indices))
    a = analytic[indices]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom))


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int  # probes whose +-h window straddles a kink


def grad_check_report(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-7,
    kink_tol: float = 1e-2,
) -> GradCheckReport:
    """Like :func:`grad_check`, but skips probes that sit on a kink.

    A ReLU or max-pool boundary near ``x`` makes the central difference
    meaningless. Such probes are detected two ways: the forward and backward
    one-sided differences disagree (on a smooth function they differ by about
    ``h * f''``), or the central differences at ``h`` and ``2h`` disagree. A
    skipped probe says nothing about the analytic gradient either way.
    """
    if not point.requires_grad:
        raise ValueError("grad_check point must have requires_grad=True")
    point.grad = None
    out = f(point)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = np.zeros(point.data.size) if point.grad is None else np.asarray(point.grad, dtype=np.float64).reshape(-1)
    center = float(out.data.sum())

    if max_checks is not None and max_checks < analytic.size:
        indices = np.sort(np.random.default_rng(seed).choice(analytic.size, size=max_checks, replace=False))
    else:
        indices = np.arange(analytic.size)
    flat = point.data.reshape(-1)

    def at(i, value):
        flat[i] = value
        return float(f(point).data.sum())

    worst, checked, skipped = 0.0, 0, 0
    for i in indices:
        orig = flat[i]
        plus, minus = at(i, orig + h), at(i, orig - h)
        plus2, minus2 = at(i, orig + 2 * h), at(i, orig - 2 * h)
        flat[i] = orig
        fwd, bwd = (plus - center) / h, (center - minus) / h
        num, num2 = (plus - minus) / (2 * h), (plus2 - minus2) / (4 * h)
        scale = max(abs(fwd), abs(bwd), abs(num2), floor)
        if abs(fwd - bwd) > kink_tol * scale or abs(num - num2) > kink_tol * scale:
            skipped += 1
            continue
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        checked += 1
    return GradCheckReport(worst, checked, skipped)
