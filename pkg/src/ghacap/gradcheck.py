"""Central finite-difference checks of backward gradients (64-bit)."""
from __future__ import annotations

import numpy as np

from . import tensor as tn
from .model import CaptionModel, build_variant

TOLERANCE = 1e-4
STEP = 1e-5


def numerical_grad(f, t, h=STEP):
    """d f() / d t.data by central differences, one element at a time."""
    g = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return g


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_tensors(loss_fn, tensors, h=STEP):
    """Compare backward against finite differences for each named tensor.

    ``loss_fn`` rebuilds the graph and returns a scalar Tensor each call.
    Returns ``{name: max relative error}``.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in tensors.items()}
    with tn.no_grad():
        return {n: max_relative_error(analytic[n], numerical_grad(lambda: loss_fn().item(), t, h))
                for n, t in tensors.items()}


def desk_problem(label="GHA-2-3-desk", T=5, vocab_size=12, rows=3, cols=3, seed=0, batch=1):
    """A 64-bit model plus random grids/tokens/targets for gradient checking."""
    cfg = build_variant(label, vocab_size=vocab_size)
    with tn.default_dtype(np.float64):
        model = CaptionModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    grids = []
    for d in cfg.feature_dims:
        scale = 2 if len(grids) == 0 and cfg.family == "ms-gha" else 1
        grids.append(rng.uniform(-2, 2, size=(batch, rows * scale, cols * scale, d)))
    tokens = rng.integers(0, vocab_size, size=(batch, T))
    targets = rng.integers(0, vocab_size, size=(batch, T))
    # perturb parameters away from zero-bias init so every path carries signal
    for p in model.params.values():
        p.data = p.data + rng.uniform(-0.3, 0.3, size=p.shape)
    return model, grids, tokens, targets


def grad_check_model(label="GHA-2-3-desk", T=5, seed=0, h=STEP):
    """``{param name: max relative error}`` for a desk model in eval mode."""
    model, grids, tokens, targets = desk_problem(label, T=T, seed=seed)

    def loss_fn():
        logits, _ = model.forward(grids, tokens)
        return tn.cross_entropy(logits, targets)

    with tn.default_dtype(np.float64):
        return check_tensors(loss_fn, model.params, h)
