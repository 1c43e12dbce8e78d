"""Causal Word-CNN: embedding plus stacked gated causal convolutions."""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tn


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 6
    kernel: int = 3
    d_concept: int = 300
    bottleneck: bool = False

    def __post_init__(self):
        if self.n_layers < 0 or self.kernel < 1 or self.d_concept < 1:
            raise ValueError(f"invalid decoder config {self}")

    @property
    def filters(self):
        """Per-level filter structure as ``[(kernel, channels), ...]``."""
        if self.bottleneck:
            return [(1, self.d_concept), (self.kernel, self.d_concept), (1, self.d_concept)]
        return [(self.kernel, self.d_concept)]

    @property
    def conv_layers(self):
        return self.n_layers * len(self.filters)

    @property
    def shortcuts(self):
        return self.n_layers if self.bottleneck else 0

    @property
    def receptive_field(self):
        return 1 + self.n_layers * sum(k - 1 for k, _ in self.filters)


def receptive_field(n_layers, kernel):
    if n_layers < 1 or kernel < 1:
        raise ValueError("n_layers and kernel must be >= 1")
    return n_layers * (kernel - 1) + 1


def embed(tokens, table):
    return tn.embedding(tokens, table)


def glu_layer(c_prev, h, p):
    """Causal conv of ``c_prev`` gated by a pointwise transform of the fused state ``h``.

    Returns ``(c, gate)``.
    """
    linear_unit = tn.causal_conv1d(c_prev, p["Wa"], p["ba"])
    gate = tn.sigmoid(tn.linear(h, p["Wb"], p["bb"]))
    return linear_unit * gate, gate


def baseline_glu_layer(c_prev, p):
    """Standard GLU: both halves are causal convolutions of ``c_prev``."""
    linear_unit = tn.causal_conv1d(c_prev, p["Wa"], p["ba"])
    gate = tn.sigmoid(tn.causal_conv1d(c_prev, p["Wg"], p["bg"]))
    return linear_unit * gate, gate


def bottleneck_layer(c_prev, h, p):
    # 1 -> k -> 1 filters; the last stage is gated, shortcut adds c_prev back.
    a = tn.linear(c_prev, p["W1"], p["b1"])
    b = tn.causal_conv1d(a, p["W2"], p["b2"])
    linear_unit = tn.linear(b, p["W3"], p["b3"])
    if h is None:
        gate = tn.sigmoid(tn.linear(b, p["Wg"], p["bg"]))
    else:
        gate = tn.sigmoid(tn.linear(h, p["Wb"], p["bb"]))
    return linear_unit * gate + c_prev, gate


def layer_shapes(cfg: DecoderConfig, d_hidden=None):
    """Parameter shapes of one decoder level; ``d_hidden=None`` means baseline gating."""
    D, k = cfg.d_concept, cfg.kernel
    if cfg.bottleneck:
        shapes = {"W1": (D, D), "b1": (D,), "W2": (k, D, D), "b2": (D,), "W3": (D, D), "b3": (D,)}
        if d_hidden is None:
            shapes.update(Wg=(D, D), bg=(D,))
        else:
            shapes.update(Wb=(d_hidden, D), bb=(D,))
        return shapes
    shapes = {"Wa": (k, D, D), "ba": (D,)}
    if d_hidden is None:
        shapes.update(Wg=(k, D, D), bg=(D,))
    else:
        shapes.update(Wb=(d_hidden, D), bb=(D,))
    return shapes


def decoder_layer(cfg: DecoderConfig, c_prev, h, p):
    if cfg.bottleneck:
        return bottleneck_layer(c_prev, h, p)
    if h is None:
        return baseline_glu_layer(c_prev, p)
    return glu_layer(c_prev, h, p)
