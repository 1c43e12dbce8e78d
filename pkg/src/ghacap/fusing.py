"""Fusing block: a GRU whose recurrence runs up the decoder levels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn


@dataclass
class FusingState:
    x: tn.Tensor
    r: tn.Tensor
    z: tn.Tensor
    h_candidate: tn.Tensor
    h: tn.Tensor


def fusing_shapes(d_hidden, d_visual, d_concept):
    d_in = d_hidden + d_visual + d_concept
    return {
        "Wr": (d_in, d_hidden), "br": (d_hidden,),
        "Wz": (d_in, d_hidden), "bz": (d_hidden,),
        "Wh": (d_in, d_hidden), "bh": (d_hidden,),
    }


def fuse_step(h_prev, v_hat_prev, c_prev, p) -> FusingState:
    """One GRU step from level l-1 to l with input ``[v_hat_prev, c_prev]``."""
    x = tn.concat([v_hat_prev, c_prev])
    hx = tn.concat([h_prev, x])
    r = tn.sigmoid(tn.linear(hx, p["Wr"], p["br"]))
    z = tn.sigmoid(tn.linear(hx, p["Wz"], p["bz"]))
    h_cand = tn.tanh(tn.linear(tn.concat([r * h_prev, x]), p["Wh"], p["bh"]))
    h = (1.0 - z) * h_prev + z * h_cand
    return FusingState(x, r, z, h_cand, h)


def initial_state(like, d_hidden):
    """``h^0 = 0`` shaped like ``like`` with the last axis replaced by ``d_hidden``."""
    return tn.Tensor(np.zeros(like.shape[:-1] + (d_hidden,), dtype=like.dtype))


def fuse_levels(v_hat_stack, c_stack, params):
    """Fold ``fuse_step`` bottom-up over aligned level stacks.

    ``params`` is either one shared parameter mapping or a list with one
    mapping per level 1..L. Returns ``[h^0, ..., h^L]``.
    """
    if len(v_hat_stack) != len(c_stack):
        raise ValueError(f"misaligned stacks: {len(v_hat_stack)} visual vs {len(c_stack)} concept levels")
    d_hidden = (params[0] if isinstance(params, list) else params)["br"].shape[0]
    hs = [initial_state(c_stack[0], d_hidden)]
    for l in range(1, len(c_stack)):
        p = params[l - 1] if isinstance(params, list) else params
        hs.append(fuse_step(hs[-1], v_hat_stack[l - 1], c_stack[l - 1], p).h)
    return hs
