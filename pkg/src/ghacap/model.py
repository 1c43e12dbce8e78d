"""Baseline, GHA and MS-GHA captioning models.

A model owns a flat ``name -> Tensor`` parameter dict; the forward pass is a
straight composition of the layer functions in :mod:`decoder`,
:mod:`attention` and :mod:`fusing`.
"""
from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tn
from .attention import attend, gate_combine
from .corpus import FeatureMaps, pool_grids, project_scales
from .decoder import DecoderConfig, decoder_layer, embed, layer_shapes
from .fusing import fuse_step, fusing_shapes, initial_state

FAMILIES = ("baseline", "gha", "ms-gha")
_LABEL = re.compile(r"^(Base|GHA|MS-GHA)-(\d+)(B?)-(\d+)(-desk)?$")
_FAMILY_OF = {"Base": "baseline", "GHA": "gha", "MS-GHA": "ms-gha"}

# Reference label grid; other (L, k) combinations parse as well.
REFERENCE_VARIANTS = (
    "Base-6-3", "Base-6-5", "Base-6-7", "Base-10-3", "Base-6B-3",
    "GHA-6-3", "GHA-6-5", "GHA-6-7", "GHA-10-3", "GHA-6B-3",
    "MS-GHA-6-3", "MS-GHA-6-5", "MS-GHA-6-7",
)

FULL_SCALE = dict(d_concept=300, d_visual=2048, d_hidden=512, head_hidden=4096, vocab_size=9489)
DESK_SCALE = dict(d_concept=6, d_visual=8, d_hidden=8, head_hidden=32, vocab_size=12)
FULL_FEATURE_DIMS = {"single": [2048], "multi": [512, 1024, 2048]}
DESK_FEATURE_DIMS = {"single": [16], "multi": [16, 16, 16]}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    family: str = "gha"
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    d_visual: int = 2048
    d_hidden: int = 512
    feature_dims: list = field(default_factory=lambda: [2048])
    assignment: list = field(default_factory=list)
    head_hidden: int = 4096
    head_depth: int = 3
    keep_prob: float = 0.5
    vocab_size: int = 9489
    label: str = "GHA-6-3"
    shared_attention: bool = False
    shared_fusing: bool = True

    def __post_init__(self):
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if not self.assignment:
            self.assignment = scale_assignment(self.decoder.n_layers, len(self.feature_dims), self.family)
        self.validate()

    @property
    def n_levels(self):
        return self.decoder.n_layers + 1

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.family == "ms-gha" and len(self.feature_dims) < 2:
            raise ConfigError("ms-gha needs at least two feature grids")
        if len(self.assignment) != self.n_levels:
            raise ConfigError(f"scale assignment covers {len(self.assignment)} levels, need {self.n_levels}")
        if any(not 0 <= g < len(self.feature_dims) for g in self.assignment):
            raise ConfigError(f"scale assignment {self.assignment} references a missing grid")
        if self.head_depth < 1 or not 0 < self.keep_prob <= 1:
            raise ConfigError("head_depth must be >= 1 and keep_prob in (0, 1]")

    def to_json(self):
        d = asdict(self)
        d["decoder"] = asdict(self.decoder)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def scale_assignment(n_layers, n_grids, family="gha"):
    """Level -> grid index, splitting the L+1 levels into ``n_grids`` contiguous runs.

    Boundaries sit at ``round((L+1) * i / n_grids)``, which for L=6 and three
    grids gives levels {0,1}, {2,3,4}, {5,6}. Baseline attends only at the top
    and uses the last (coarsest) grid.
    """
    n = n_layers + 1
    if family != "ms-gha" or n_grids == 1:
        return [n_grids - 1] * n if family == "baseline" else [0] * n
    bounds = [math.floor(n * i / n_grids + 0.5) for i in range(1, n_grids)]
    return [sum(level >= b for b in bounds) for level in range(n)]


def parse_label(label):
    m = _LABEL.match(label)
    if not m:
        raise ConfigError(f"unknown variant label {label!r}")
    fam, L, bott, k, desk = m.groups()
    return _FAMILY_OF[fam], int(L), bool(bott), int(k), bool(desk)


def build_variant(label, desk=False, **overrides) -> ModelConfig:
    """Architecture for ``label``; ``desk`` (or a ``-desk`` suffix) shrinks widths."""
    family, L, bottleneck, k, desk_suffix = parse_label(label)
    desk = desk or desk_suffix
    if L < 1 or k < 1:
        raise ConfigError(f"variant {label!r} needs L >= 1 and k >= 1")
    scale = DESK_SCALE if desk else FULL_SCALE
    dims = (DESK_FEATURE_DIMS if desk else FULL_FEATURE_DIMS)["multi" if family == "ms-gha" else "single"]
    base_label = label[:-5] if desk_suffix else label
    cfg = dict(
        family=family,
        decoder=DecoderConfig(L, k, scale["d_concept"], bottleneck),
        d_visual=scale["d_visual"],
        d_hidden=scale["d_hidden"],
        feature_dims=list(dims),
        head_hidden=scale["head_hidden"],
        vocab_size=scale["vocab_size"],
        label=base_label + ("-desk" if desk else ""),
    )
    cfg.update(overrides)
    if "decoder" in overrides and isinstance(overrides["decoder"], dict):
        cfg["decoder"] = replace(DecoderConfig(L, k, scale["d_concept"], bottleneck), **overrides["decoder"])
    return ModelConfig(**cfg)


def param_shapes(cfg: ModelConfig):
    """Ordered ``name -> shape`` for every trainable parameter of ``cfg``."""
    dec = cfg.decoder
    L, Dc, Dv, Dh = dec.n_layers, dec.d_concept, cfg.d_visual, cfg.d_hidden
    gha = cfg.family != "baseline"
    shapes = {}
    for g, d in enumerate(cfg.feature_dims):
        if gha or g == cfg.assignment[-1]:
            shapes[f"proj.{g}.W"] = (d, Dv)
            shapes[f"proj.{g}.b"] = (Dv,)
    shapes["embed.E"] = (cfg.vocab_size, Dc)
    for l in range(1, L + 1):
        for name, s in layer_shapes(dec, Dh if gha else None).items():
            shapes[f"dec.{l}.{name}"] = s
    att_levels = range(L + 1) if gha else [L]
    if cfg.shared_attention:
        shapes["att.W"] = (Dv, Dc)
    else:
        for l in att_levels:
            shapes[f"att.{l}.W"] = (Dv, Dc)
    if gha and L > 0:
        for l in range(1, L + 1):
            shapes[f"vgate.{l}.W"] = (Dh, Dv)
            shapes[f"vgate.{l}.b"] = (Dv,)
        fshapes = fusing_shapes(Dh, Dv, Dc)
        prefixes = ["fuse"] if cfg.shared_fusing else [f"fuse.{l}" for l in range(1, L + 1)]
        for pre in prefixes:
            for name, s in fshapes.items():
                shapes[f"{pre}.{name}"] = s
    widths = [Dv + Dc] + [cfg.head_hidden] * (cfg.head_depth - 1) + [cfg.vocab_size]
    for i in range(cfg.head_depth):
        shapes[f"head.{i}.W"] = (widths[i], widths[i + 1])
        shapes[f"head.{i}.b"] = (widths[i + 1],)
    return shapes


def count_parameters(cfg: ModelConfig):
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _init_value(name, shape, seed):
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    leaf = name.rsplit(".", 1)[-1]
    if name == "embed.E":
        return rng.uniform(-0.08, 0.08, size=shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    if len(shape) == 3:
        k, cin, cout = shape
        fan_in, fan_out = k * cin, k * cout
    else:
        fan_in, fan_out = shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ForwardDiagnostics:
    """Per-level arrays (``None`` where a level has no such quantity).

    Shapes: ``attention[l]`` ``[B, T, N_l]``; ``visual_gates[l]`` ``[B, T, Dv]``;
    ``concept_gates[l]`` ``[B, T, Dc]``; ``h[l]`` ``[B, T, Dh]``;
    ``v_tilde[l]`` ``[B, T, Dv]``; ``grids[l]`` ``[B, N_l, Dv]`` (projected);
    ``grid_shapes[l]`` ``(rows, cols)``.
    """

    attention: list
    scores: list
    visual_gates: list
    concept_gates: list
    h: list
    v_tilde: list
    grids: list
    grid_shapes: list


class CaptionModel:
    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.params = {
            name: tn.parameter(_init_value(name, shape, seed), dtype=dtype)
            for name, shape in param_shapes(cfg).items()
        }

    # -- parameter bookkeeping ---------------------------------------------
    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def parameter_groups(self):
        """``{"encoder": [...], "rest": [...]}``; encoder = the feature projections."""
        enc = [n for n in self.params if n.startswith("proj.")]
        rest = [n for n in self.params if not n.startswith("proj.")]
        return {"encoder": enc, "rest": rest}

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            if tuple(arr.shape) != self.params[n].shape:
                raise ConfigError(f"shape conflict for {n}: checkpoint {tuple(arr.shape)} vs model {self.params[n].shape}")
        for n, arr in state.items():
            self.params[n].data = np.array(arr, dtype=self.dtype)

    def _p(self, prefix):
        pre = prefix + "."
        return {n[len(pre):]: t for n, t in self.params.items() if n.startswith(pre)}

    def _att_W(self, level):
        return self.params["att.W"] if self.cfg.shared_attention else self.params[f"att.{level}.W"]

    def _fuse_p(self, level):
        return self._p("fuse") if self.cfg.shared_fusing else self._p(f"fuse.{level}")

    # -- forward ------------------------------------------------------------
    def project(self, grids):
        """Pool and project batched raw grids; returns ``[B, N, Dv]`` tensors and grid extents."""
        cfg = self.cfg
        pooled = pool_grids(grids)
        shapes = [g.shape[-3:-1] for g in pooled]
        used = sorted(set(cfg.assignment)) if cfg.family != "baseline" else [cfg.assignment[-1]]
        W = {g: self.params[f"proj.{g}.W"] for g in used}
        b = {g: self.params[f"proj.{g}.b"] for g in used}
        out = [None] * len(grids)
        for g in used:
            (out[g],) = project_scales([pooled[g]], cfg.d_visual, [W[g]], [b[g]])
        return out, shapes

    def predict_head(self, v, c, training=False, rng_key=(0, 0)):
        x = tn.concat([v, c])
        depth = self.cfg.head_depth
        for i in range(depth):
            x = tn.linear(x, self.params[f"head.{i}.W"], self.params[f"head.{i}.b"])
            if i < depth - 1:
                x = tn.elu(x)
                x = tn.dropout(x, self.cfg.keep_prob, training, tuple(rng_key) + (i,))
        return x

    def forward(self, grids, tokens, training=False, rng_key=(0, 0), diagnostics=False):
        """Logits ``[B, T, V]`` for batched raw grids and token ids ``[B, T]``.

        ``grids`` is a list of ``[B, rows, cols, D]`` arrays (one per scale) or a
        single-example ``FeatureMaps`` with ``tokens`` of shape ``[T]``.
        """
        single = isinstance(grids, FeatureMaps)
        if single:
            grids = [g[None] for g in grids.grids]
            tokens = np.asarray(tokens)[None]
        tokens = np.asarray(tokens)
        if len(grids) != len(self.cfg.feature_dims):
            raise ConfigError(f"model expects {len(self.cfg.feature_dims)} grids, got {len(grids)}")
        if self.cfg.family == "baseline":
            logits, diag = self._forward_baseline(grids, tokens, training, rng_key, diagnostics)
        else:
            logits, diag = self._forward_gha(grids, tokens, training, rng_key, diagnostics)
        if single:
            logits = logits[0]
        return logits, diag

    __call__ = forward

    def _forward_gha(self, grids, tokens, training, rng_key, want):
        cfg = self.cfg
        L = cfg.decoder.n_layers
        V, shapes = self.project(grids)
        grid = [V[cfg.assignment[l]] for l in range(L + 1)]
        diag = _Recorder(want, L)
        c = embed(tokens, self.params["embed.E"])
        v_tilde, a, s = attend(grid[0], c, self._att_W(0))
        v_hat = v_tilde
        diag.level(0, a, s, v_tilde, grid[0], shapes[cfg.assignment[0]])
        h = initial_state(c, cfg.d_hidden)
        diag.h[0] = h.data
        for l in range(1, L + 1):
            h = fuse_step(h, v_hat, c, self._fuse_p(l)).h
            c, cgate = decoder_layer(cfg.decoder, c, h, self._p(f"dec.{l}"))
            v_tilde, a, s = attend(grid[l], c, self._att_W(l))
            v_hat, vgate = gate_combine(v_tilde, v_hat, h, self.params[f"vgate.{l}.W"],
                                        self.params[f"vgate.{l}.b"], level=l)
            diag.level(l, a, s, v_tilde, grid[l], shapes[cfg.assignment[l]],
                       vgate=vgate, cgate=cgate, h=h)
        return self.predict_head(v_hat, c, training, rng_key), diag.result()

    def _forward_baseline(self, grids, tokens, training, rng_key, want):
        cfg = self.cfg
        L = cfg.decoder.n_layers
        V, shapes = self.project(grids)
        top = cfg.assignment[-1]
        diag = _Recorder(want, L)
        c = embed(tokens, self.params["embed.E"])
        for l in range(1, L + 1):
            c, cgate = decoder_layer(cfg.decoder, c, None, self._p(f"dec.{l}"))
            diag.level(l, cgate=cgate)
        v_tilde, a, s = attend(V[top], c, self._att_W(L))
        diag.level(L, a, s, v_tilde, V[top], shapes[top])
        return self.predict_head(v_tilde, c, training, rng_key), diag.result()

    # -- losses and decoding helpers ---------------------------------------
    def loss(self, batch, training=False, rng_key=(0, 0), diagnostics=False):
        logits, diag = self.forward(batch.grids, batch.inputs, training, rng_key, diagnostics)
        return tn.cross_entropy(logits, batch.targets, batch.target_mask), diag

    def next_log_probs(self, grids, prefixes):
        """Log-probabilities ``[n, V]`` of the token after each prefix in ``prefixes [n, t]``.

        ``grids`` are single-example ``[rows, cols, D]`` arrays broadcast over the prefixes.
        """
        prefixes = np.asarray(prefixes)
        n = prefixes.shape[0]
        batched = [np.broadcast_to(g, (n,) + g.shape) for g in grids]
        with tn.no_grad():
            logits, _ = self.forward(batched, prefixes)
        return tn.log_softmax_np(logits.data[:, -1, :].astype(np.float64))


class _Recorder:
    def __init__(self, enabled, L):
        self.enabled = enabled
        n = L + 1
        self.attention = [None] * n
        self.scores = [None] * n
        self.visual_gates = [None] * n
        self.concept_gates = [None] * n
        self.h = [None] * n
        self.v_tilde = [None] * n
        self.grids = [None] * n
        self.grid_shapes = [None] * n

    def level(self, l, a=None, s=None, v_tilde=None, grid=None, shape=None, vgate=None, cgate=None, h=None):
        if not self.enabled:
            return
        for name, val in (("attention", a), ("scores", s), ("v_tilde", v_tilde), ("grids", grid),
                          ("visual_gates", vgate), ("concept_gates", cgate), ("h", h)):
            if val is not None:
                getattr(self, name)[l] = val.data
        if shape is not None:
            self.grid_shapes[l] = tuple(shape)

    def result(self):
        if not self.enabled:
            return None
        return ForwardDiagnostics(self.attention, self.scores, self.visual_gates, self.concept_gates,
                                  self.h, self.v_tilde, self.grids, self.grid_shapes)


def check_attention_invariants(diag: ForwardDiagnostics, sum_tol=1e-6, hull_tol=1e-5):
    """Return a list of violation messages (empty when every map is a distribution
    and every attended feature lies inside its grid's per-channel range)."""
    problems = []
    for l, a in enumerate(diag.attention):
        if a is None:
            continue
        sums = a.astype(np.float64).sum(axis=-1)
        if np.abs(sums - 1).max() > sum_tol:
            problems.append(f"level {l}: attention sums deviate by {np.abs(sums - 1).max():.3g}")
        if (a < 0).any():
            problems.append(f"level {l}: negative attention weight")
        grid, vt = diag.grids[l], diag.v_tilde[l]
        lo = grid.min(axis=-2, keepdims=True)
        hi = grid.max(axis=-2, keepdims=True)
        scale = np.maximum(np.abs(grid).max(axis=-2, keepdims=True), 1.0)
        if ((vt < lo - hull_tol * scale) | (vt > hi + hull_tol * scale)).any():
            problems.append(f"level {l}: attended feature outside grid range")
    return problems


def max_abs_hidden(diag: ForwardDiagnostics):
    vals = [np.abs(h).max() for h in diag.h[1:] if h is not None]
    return max(vals) if vals else 0.0
