"""Attention-map export (PGM + JSON) and per-word gate statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VISUAL_THRESHOLD = 0.65
CONCEPT_THRESHOLD = 0.25
DEFAULT_VIEW = 224


def _interp_matrix(n_out, n_in, mode):
    """Row ``i`` holds the weights of input samples for output sample ``i`` (half-pixel centres)."""
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(n_out) + 0.5) * n_in / n_out), 0, n_in - 1).astype(int)
        A[np.arange(n_out), idx] = 1.0
        return A
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(A, (np.arange(n_out), lo), 1 - frac)
    np.add.at(A, (np.arange(n_out), hi), frac)
    return A


def upsample(weights, target_h, target_w, mode="bilinear"):
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown upsampling mode {mode!r}")
    weights = np.asarray(weights, dtype=np.float64)
    rows, cols = weights.shape
    return _interp_matrix(target_h, rows, mode) @ weights @ _interp_matrix(target_w, cols, mode).T


def to_pgm(image) -> bytes:
    """Binary P5 graymap, max-normalised to 255."""
    image = np.asarray(image, dtype=np.float64)
    peak = image.max()
    scaled = np.zeros_like(image) if peak <= 0 else image / peak * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_pgm(data: bytes):
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


@dataclass
class ExportedAttention:
    upsampled: np.ndarray
    pgm: bytes
    payload: dict


def export_attention(amap, target_w=DEFAULT_VIEW, target_h=DEFAULT_VIEW, out_prefix=None, mode="bilinear"):
    """Upsample an ``AttentionMap`` (or bare ``[rows, cols]`` weights) and optionally write
    ``<out_prefix>.pgm`` and ``<out_prefix>.json``."""
    weights = np.asarray(getattr(amap, "weights", amap), dtype=np.float64)
    up = upsample(weights, target_h, target_w, mode)
    payload = {
        "level": getattr(amap, "level", None),
        "position": getattr(amap, "position", None),
        "rows": weights.shape[0],
        "cols": weights.shape[1],
        "target_w": target_w,
        "target_h": target_h,
        "mode": mode,
        "weights": weights.tolist(),
    }
    out = ExportedAttention(up, to_pgm(up), payload)
    if out_prefix is not None:
        prefix = Path(out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".pgm").write_bytes(out.pgm)
        prefix.with_suffix(".json").write_text(json.dumps(payload, sort_keys=True))
    return out


@dataclass
class GateStats:
    """``visual[t][l]`` / ``concept[t][l]``: fraction of gates above threshold, ``None`` if absent."""

    words: list
    visual: list
    concept: list
    thresholds: tuple

    def to_json(self):
        return {
            "thresholds": {"visual": self.thresholds[0], "concept": self.thresholds[1]},
            "words": self.words,
            "levels": len(self.visual[0]) if self.visual else 0,
            "visual_on": self.visual,
            "concept_on": self.concept,
        }


def _fractions(gates, threshold):
    # gates: [T, D]
    return (np.asarray(gates) > threshold).mean(axis=-1)


def gate_report(diag, thresholds=(VISUAL_THRESHOLD, CONCEPT_THRESHOLD), words=None, item=0):
    """Per-word, per-level share of visual and concept gates that are on."""
    if diag is None:
        raise ValueError("gate_report needs forward diagnostics")
    v_thr, c_thr = thresholds
    n_levels = len(diag.concept_gates)
    T = next(g.shape[1] for g in diag.concept_gates + diag.visual_gates if g is not None) \
        if any(g is not None for g in diag.concept_gates + diag.visual_gates) else 0
    visual = [[None] * n_levels for _ in range(T)]
    concept = [[None] * n_levels for _ in range(T)]
    for l in range(n_levels):
        vg, cg = diag.visual_gates[l], diag.concept_gates[l]
        if vg is not None:
            for t, f in enumerate(_fractions(vg[item], v_thr)):
                visual[t][l] = float(f)
        if cg is not None:
            for t, f in enumerate(_fractions(cg[item], c_thr)):
                concept[t][l] = float(f)
    words = list(words) if words is not None else [str(t) for t in range(T)]
    return GateStats(words, visual, concept, (v_thr, c_thr))
