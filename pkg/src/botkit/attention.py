"""Global 2-D multi-head self-attention with relative position logits.

For a feature map flattened to ``n = H * W`` positions, each head computes

    e_ij   = (q_i . k_j + q_i . r_ij) / sqrt(d_head)
    alpha  = softmax_j(e_ij)
    z_i    = sum_j alpha_ij (v_j [+ rv_ij])

with ``r_ij = R_h[dh] + R_w[dw]`` where ``(dh, dw)`` is the signed
(row, column) offset from query position ``i`` to key position ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from . import functional as F
from .nn import Module, Parameter, ParameterList
from .tensor import Tensor, einsum_const, stack


@dataclass(frozen=True)
class MhsaConfig:
    d_model: int
    heads: int = 8
    use_value_relative: bool = False

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError(f"heads must be >= 1, got {self.heads}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


@dataclass
class AttentionTrace:
    """Per-head logits and weights, each of shape (N, heads, n, n)."""

    content: np.ndarray
    positional: np.ndarray
    weights: np.ndarray


def relative_offset_index(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Table rows used by each (query, key) pair.

    Returns ``(row_idx, col_idx)``, both (n, n), where
    ``row_idx[i, j] = row(j) - row(i) + height - 1`` and likewise for columns.
    """
    rows, cols = np.divmod(np.arange(height * width), width)
    row_idx = rows[None, :] - rows[:, None] + height - 1
    col_idx = cols[None, :] - cols[:, None] + width - 1
    assert row_idx.min() >= 0 and row_idx.max() <= 2 * height - 2
    assert col_idx.min() >= 0 and col_idx.max() <= 2 * width - 2
    return row_idx, col_idx


@lru_cache(maxsize=32)
def _offset_onehots(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    row_idx, col_idx = relative_offset_index(height, width)
    eye_h = np.eye(2 * height - 1)
    eye_w = np.eye(2 * width - 1)
    onehot_h, onehot_w = eye_h[row_idx], eye_w[col_idx]
    onehot_h.flags.writeable = False
    onehot_w.flags.writeable = False
    return onehot_h, onehot_w


def _check_tables(rh: Tensor, rw: Tensor, height: int, width: int) -> None:
    if rh.shape[0] != 2 * height - 1 or rw.shape[0] != 2 * width - 1:
        raise ValueError(
            f"relative tables sized {rh.shape[0]}x{rw.shape[0]} rows, "
            f"expected {2 * height - 1}x{2 * width - 1} for a {height}x{width} map"
        )
    if rh.shape[1] != rw.shape[1]:
        raise ValueError(f"R_h width {rh.shape[1]} != R_w width {rw.shape[1]}")


def content_logits(x, w_q, w_k) -> Tensor:
    """Scaled dot-product logits ``(x W_q)(x W_k)^T / sqrt(d_head)``; x is (..., n, d_model)."""
    if x.shape[-1] != w_q.shape[-2] or x.shape[-1] != w_k.shape[-2]:
        raise ValueError(f"feature size {x.shape[-1]} does not match projections {w_q.shape}, {w_k.shape}")
    q = x @ w_q
    k = x @ w_k
    return (q @ k.T) * (1.0 / np.sqrt(q.shape[-1]))


def relative_logits(q, rh, rw, height: int, width: int) -> Tensor:
    """Unscaled positional logits ``b_ij = q_i . (R_h[dh] + R_w[dw])``.

    ``q`` is (..., n, d_head) with ``n = height * width``; the result is
    (..., n, n).
    """
    if q.shape[-2] != height * width:
        raise ValueError(f"q has {q.shape[-2]} positions, expected {height}*{width}")
    _check_tables(rh, rw, height, width)
    onehot_h, onehot_w = _offset_onehots(height, width)
    by_row = einsum_const(q @ rh.T, onehot_h, "...ik,ijk->...ij")
    by_col = einsum_const(q @ rw.T, onehot_w, "...ik,ijk->...ij")
    return by_row + by_col


def attention_weights(e) -> Tensor:
    return F.softmax(e, axis=-1)


def attention_output(alpha, x, w_v, value_relative=None) -> Tensor:
    """``z_i = sum_j alpha_ij (x_j W_v + rv_ij)``.

    ``value_relative`` is ``None`` or a tuple ``(rv_h, rv_w, height, width)``
    of value-side offset tables, factorised like the key-side ones.
    """
    if x.shape[-1] != w_v.shape[-2]:
        raise ValueError(f"feature size {x.shape[-1]} does not match W_v {w_v.shape}")
    if alpha.shape[-1] != x.shape[-2]:
        raise ValueError(f"attention over {alpha.shape[-1]} keys but x has {x.shape[-2]} positions")
    z = alpha @ (x @ w_v)
    if value_relative is not None:
        rv_h, rv_w, height, width = value_relative
        _check_tables(rv_h, rv_w, height, width)
        onehot_h, onehot_w = _offset_onehots(height, width)
        z = z + einsum_const(alpha, onehot_h, "...ij,ijk->...ik") @ rv_h
        z = z + einsum_const(alpha, onehot_w, "...ij,ijk->...ik") @ rv_w
    return z


class MhsaLayer(Module):
    """Per-head W_q, W_k, W_v (d_model x d_head) and head-shared R_h, R_w tables."""

    def __init__(self, config: MhsaConfig, height: int, width: int, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.height, self.width = height, width
        d, dh = config.d_model, config.d_head

        def proj():
            return Parameter((rng.standard_normal((d, dh)) * d**-0.5).astype(dtype))

        self.wq = ParameterList([proj() for _ in range(config.heads)])
        self.wk = ParameterList([proj() for _ in range(config.heads)])
        self.wv = ParameterList([proj() for _ in range(config.heads)])

        def table(rows):
            return Parameter((rng.standard_normal((rows, dh)) * dh**-0.5).astype(dtype))

        self.rh = table(2 * height - 1)
        self.rw = table(2 * width - 1)
        if config.use_value_relative:
            self.rvh = table(2 * height - 1)
            self.rvw = table(2 * width - 1)

    def forward(self, x, trace: bool = False):
        return mhsa2d_forward(x, self, trace=trace)


def mhsa2d_forward(feature_map, layer: MhsaLayer, trace: bool = False):
    """(N, d_model, H, W) -> (N, d_model, H, W); with ``trace`` also an AttentionTrace."""
    cfg = layer.config
    n_batch, channels, height, width = feature_map.shape
    if channels != cfg.d_model:
        raise ValueError(f"feature map has {channels} channels, layer expects {cfg.d_model}")
    if (height, width) != (layer.height, layer.width):
        raise ValueError(
            f"layer tables built for {layer.height}x{layer.width} maps, got {height}x{width}"
        )
    n = height * width
    x = feature_map.reshape(n_batch, channels, n).transpose(0, 2, 1).reshape(n_batch, 1, n, channels)

    w_q = stack(list(layer.wq))
    w_k = stack(list(layer.wk))
    w_v = stack(list(layer.wv))
    q = x @ w_q  # N, heads, n, d_head
    k = x @ w_k
    b = relative_logits(q, layer.rh, layer.rw, height, width)
    scale = 1.0 / np.sqrt(cfg.d_head)
    e = (q @ k.T + b) * scale
    alpha = attention_weights(e)
    value_relative = (layer.rvh, layer.rvw, height, width) if cfg.use_value_relative else None
    z = attention_output(alpha, x, w_v, value_relative)

    out = z.transpose(0, 1, 3, 2).reshape(n_batch, cfg.heads * cfg.d_head, height, width)
    if not trace:
        return out
    content = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    return out, AttentionTrace(content=content, positional=b.data.copy(), weights=alpha.data.copy())
