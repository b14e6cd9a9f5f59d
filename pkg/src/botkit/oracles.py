"""Slow, loop-based reference implementations used to check the fast paths.

Nothing here shares code with the vectorised implementations; every oracle
works on plain numpy arrays one element at a time.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    assert c == c2
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * w[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def _naive_pool(x, kernel, stride, padding, reduce, fill):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * padding, w + 2 * padding), fill, dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for i, ch, r, s in itertools.product(range(n), range(c), range(ho), range(wo)):
        window = [xp[i, ch, r * stride + u, s * stride + v] for u in range(kernel) for v in range(kernel)]
        out[i, ch, r, s] = reduce(window)
    return out


def naive_max_pool2d(x, kernel, stride, padding=0):
    return _naive_pool(x, kernel, stride, padding, max, -np.inf)


def naive_avg_pool2d(x, kernel, stride):
    return _naive_pool(x, kernel, stride, 0, lambda v: sum(v) / len(v), 0.0)


def _softmax_list(values):
    m = max(values)
    ex = [math.exp(v - m) for v in values]
    s = sum(ex)
    return [e / s for e in ex]


def brute_force_mhsa(fmap, wq, wk, wv, rh, rw, rvh=None, rvw=None, use_positions=True):
    """Position-by-position attention for one (N, C, H, W) map.

    ``wq``/``wk``/``wv`` are lists of per-head (C, d_head) matrices and
    ``rh``/``rw`` are the (2H-1, d_head) and (2W-1, d_head) offset tables,
    indexed by key position minus query position.
    """
    n_batch, c, h, w = fmap.shape
    heads = len(wq)
    dh = wq[0].shape[1]
    out = np.zeros((n_batch, heads * dh, h, w))
    positions = [(r, s) for r in range(h) for s in range(w)]
    for bi in range(n_batch):
        xs = [fmap[bi, :, r, s] for r, s in positions]
        for head in range(heads):
            qs = [x @ wq[head] for x in xs]
            ks = [x @ wk[head] for x in xs]
            vs = [x @ wv[head] for x in xs]
            for i, (ri, si) in enumerate(positions):
                logits = []
                for j, (rj, sj) in enumerate(positions):
                    e = float(qs[i] @ ks[j])
                    if use_positions:
                        r_ij = rh[rj - ri + h - 1] + rw[sj - si + w - 1]
                        e += float(qs[i] @ r_ij)
                    logits.append(e / math.sqrt(dh))
                alpha = _softmax_list(logits)
                z = np.zeros(dh)
                for j, (rj, sj) in enumerate(positions):
                    v = vs[j]
                    if rvh is not None:
                        v = v + rvh[rj - ri + h - 1] + rvw[sj - si + w - 1]
                    z += alpha[j] * v
                out[bi, head * dh : (head + 1) * dh, ri, si] = z
    return out


def layer_brute_force(fmap, layer, use_positions=True):
    """``brute_force_mhsa`` with the weights pulled out of an MhsaLayer."""
    rv = (layer.rvh.data, layer.rvw.data) if layer.config.use_value_relative else (None, None)
    return brute_force_mhsa(
        np.asarray(fmap, dtype=np.float64),
        [p.data for p in layer.wq],
        [p.data for p in layer.wk],
        [p.data for p in layer.wv],
        layer.rh.data,
        layer.rw.data,
        *rv,
        use_positions=use_positions,
    )


def pairwise_auc(scores, truth):
    """P(score_pos > score_neg) + 0.5 P(score_pos == score_neg), by enumerating pairs."""
    pos = [s for s, t in zip(scores, truth) if t == 1]
    neg = [s for s, t in zip(scores, truth) if t == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def enumerate_vote(labels, mean_prob):
    """Reference ensemble label: count the votes one by one."""
    ones = 0
    zeros = 0
    for lab in labels:
        if lab == 1:
            ones += 1
        else:
            zeros += 1
    if ones > zeros:
        return 1
    if zeros > ones:
        return 0
    return 1 if mean_prob >= 0.5 else 0


def central_indices(depth, k):
    lo = depth // 2 - k // 2
    hi = depth // 2 + (k + 1) // 2 - 1
    return list(range(lo, hi + 1))


def botnet50_param_count(width=1, input_size=224, heads=8, num_classes=2, in_channels=3):
    """Closed-form parameter count of the BoTNet-50 stage plan.

    Convolutions carry no bias; every BatchNorm adds gamma and beta; each
    MHSA layer adds 3 projections of mid x mid and offset tables of
    (2H-1 + 2W-1) x d_head at the resolution it attends over.
    """
    stem = int(64 * width)
    total = 7 * 7 * in_channels * stem + 2 * stem
    depths = [3, 4, 6, 3]
    mids = [int(m * width) for m in (64, 128, 256, 512)]
    c_in = stem
    size = input_size // 4
    for stage, (depth, mid) in enumerate(zip(depths, mids)):
        out = 4 * mid
        for block in range(depth):
            stride = 2 if stage > 0 and block == 0 else 1
            total += c_in * mid + 2 * mid  # 1x1 reduce + BN
            if stage == 3:
                d_head = mid // heads
                total += 3 * mid * mid + (2 * size - 1 + 2 * size - 1) * d_head
            else:
                total += 3 * 3 * mid * mid
            total += 2 * mid  # BN after the spatial op
            total += mid * out + 2 * out  # 1x1 expand + BN
            if c_in != out or stride != 1:
                total += c_in * out + 2 * out  # projection shortcut + BN
            c_in = out
            size //= stride
    total += c_in * num_classes + num_classes
    return total
