"""Per-level spatial attention and the gated bottom-up combination across levels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn


@dataclass
class AttentionMap:
    scores: np.ndarray  # [rows, cols]
    weights: np.ndarray  # [rows, cols]
    level: int
    position: int


def attend(v, c, W):
    """Scaled bilinear attention of concepts over a flattened grid.

    ``v`` is ``[..., N, Dv]`` (N grid cells), ``c`` is ``[..., T, Dc]`` and
    ``W`` is ``[Dv, Dc]``. Returns ``(v_tilde [..., T, Dv], weights [..., T, N],
    scores [..., T, N])``.
    """
    d_c = c.shape[-1]
    if W.shape != (v.shape[-1], d_c):
        raise tn.DimensionError(f"attend: W {W.shape}, v {v.shape}, c {c.shape}")
    query = tn.matmul(c, tn.transpose(W))
    scores = tn.scalar_mul(tn.matmul(query, tn.transpose(v)), 1.0 / math.sqrt(d_c))
    weights = tn.softmax(scores, axis=-1)
    return tn.matmul(weights, v), weights, scores


def level_zero_attention(v, c, W):
    """Level 0 has no lower level to combine with: the combined feature is the attended one."""
    v_tilde, weights, scores = attend(v, c, W)
    return v_tilde, weights, scores


def gate_combine(v_tilde, v_hat_prev, h, Wv, bv=None, level=1):
    """``v_tilde + sigmoid(h Wv + bv) * v_hat_prev``; returns ``(v_hat, gate)``."""
    if level < 1:
        raise ValueError("gate_combine is undefined at level 0")
    gate = tn.sigmoid(tn.linear(h, Wv, bv))
    return v_tilde + gate * v_hat_prev, gate


def attention_maps(weights, scores, rows, cols, level):
    """Split ``[T, N]`` weight/score arrays into per-position ``AttentionMap`` objects."""
    return [
        AttentionMap(scores[t].reshape(rows, cols), weights[t].reshape(rows, cols), level, t)
        for t in range(weights.shape[0])
    ]
