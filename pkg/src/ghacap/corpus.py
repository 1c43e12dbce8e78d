"""Vocabulary, synthetic scenes, GHAF feature files and caption batching."""
from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "blue", "green", "yellow")

GHAF_MAGIC = b"GHAF"
GHAF_VERSION = 1

_PUNCT = re.compile(r"[^\w\s<>]")


class FeatureFileError(ValueError):
    pass


def tokenize(caption: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", caption.lower()).split()


class Vocabulary:
    def __init__(self, tokens, min_count=1):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_count = min_count

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def encode(self, caption: str | list[str]) -> list[int]:
        words = tokenize(caption) if isinstance(caption, str) else caption
        return [self.id(w) for w in words]

    def decode(self, ids, strip=True) -> list[str]:
        """Map ids to tokens; with ``strip`` drop pads/start and stop at <end>."""
        out = []
        for i in ids:
            i = int(i)
            if strip:
                if i == END_ID:
                    break
                if i in (PAD_ID, START_ID):
                    continue
            out.append(self.itos[i])
        return out

    def to_json(self):
        return {"tokens": self.itos, "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj):
        tokens = obj["tokens"]
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(tokens[4:], obj.get("min_count", 1))


def build_vocab(captions, min_count=1) -> Vocabulary:
    """Keep words seen at least ``min_count`` times.

    Ids after the reserved block go by descending count, ties broken
    lexicographically.
    """
    captions = list(captions)
    if not captions:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for c in captions for w in tokenize(c))
    kept = [w for w, n in counts.items() if n >= min_count and w not in RESERVED]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept, min_count)


# -- feature maps -------------------------------------------------------------

@dataclass
class FeatureMaps:
    """Spatial feature grids, each shaped ``(rows, cols, channels)``.

    ``assignment`` maps decoder level to grid index; it is filled in by the
    model configuration and may be empty for raw ingested maps.
    """

    grids: list[np.ndarray]
    assignment: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for g in self.grids:
            if g.ndim != 3 or g.shape[0] * g.shape[1] < 1:
                raise ValueError(f"bad grid shape {g.shape}")

    @property
    def shapes(self):
        return [g.shape for g in self.grids]

    def grid_for(self, level):
        return self.grids[self.assignment.get(level, len(self.grids) - 1)]


def write_ghaf(path, fm: FeatureMaps):
    with open(path, "wb") as f:
        f.write(GHAF_MAGIC)
        f.write(struct.pack("<II", GHAF_VERSION, len(fm.grids)))
        for g in fm.grids:
            h, w, d = g.shape
            f.write(struct.pack("<III", w, h, d))
            f.write(np.ascontiguousarray(g, dtype="<f4").tobytes())


def read_ghaf(path) -> FeatureMaps:
    buf = Path(path).read_bytes()
    if buf[:4] != GHAF_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise FeatureFileError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != GHAF_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    pos, grids = 12, []
    for _ in range(n):
        if pos + 12 > len(buf):
            raise FeatureFileError(f"{path}: truncated grid header")
        w, h, d = struct.unpack_from("<III", buf, pos)
        pos += 12
        nbytes = 4 * w * h * d
        if pos + nbytes > len(buf):
            raise FeatureFileError(f"{path}: truncated payload")
        g = np.frombuffer(buf, dtype="<f4", count=w * h * d, offset=pos).reshape(h, w, d)
        grids.append(g.astype(np.float32))
        pos += nbytes
    if pos != len(buf):
        raise FeatureFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return FeatureMaps(grids)


ingest_features = read_ghaf


def avg_pool2(grid: np.ndarray) -> np.ndarray:
    """2x2 mean pooling, stride 2; odd extents replicate the last row/column."""
    h, w = grid.shape[-3], grid.shape[-2]
    if h % 2:
        grid = np.concatenate([grid, grid[..., -1:, :, :]], axis=-3)
    if w % 2:
        grid = np.concatenate([grid, grid[..., :, -1:, :]], axis=-2)
    lead = grid.shape[:-3]
    h2, w2 = grid.shape[-3] // 2, grid.shape[-2] // 2
    return grid.reshape(*lead, h2, 2, w2, 2, grid.shape[-1]).mean(axis=(-4, -2))


def pool_grids(grids):
    """Average-pool every grid wider than the middle scale down to it.

    Grids are ``[..., rows, cols, D]``; leading (batch) axes are preserved.
    """
    widths = sorted({g.shape[-2] for g in grids}, reverse=True)
    mid = widths[len(widths) // 2]
    out = []
    for g in grids:
        while g.shape[-2] > mid:
            g = avg_pool2(g)
        out.append(g)
    return out


def pool_scales(fm: FeatureMaps) -> FeatureMaps:
    return FeatureMaps(pool_grids(fm.grids), dict(fm.assignment))


def project_scales(fm, target_dv, weights=None, biases=None):
    """Pool to the middle scale, then map every grid to ``target_dv`` channels.

    ``weights[g]`` is a ``[D_g, target_dv]`` tensor (the learnable encoder
    projection); without weights an identity map is used, which requires
    ``D_g == target_dv``. ``fm`` is a FeatureMaps or a list of batched
    ``[B, rows, cols, D]`` grids. Returns one ``[..., rows*cols, target_dv]``
    tensor per grid.
    """
    grids = fm.grids if isinstance(fm, FeatureMaps) else fm
    out = []
    for gi, g in enumerate(pool_grids(grids)):
        dtype = None if weights is None else weights[gi].dtype
        x = tn.Tensor(g.reshape(*g.shape[:-3], -1, g.shape[-1]), dtype=dtype)
        if weights is None:
            if g.shape[-1] != target_dv:
                raise ValueError(f"grid {gi} has {g.shape[-1]} channels, need a projection to {target_dv}")
            out.append(x)
            continue
        if weights[gi].shape != (g.shape[-1], target_dv):
            raise tn.DimensionError(f"projection {gi}: {weights[gi].shape} vs grid {g.shape}")
        b = None if biases is None else biases[gi]
        out.append(tn.linear(x, weights[gi], b))
    return out


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class SceneSpec:
    rows: int
    cols: int
    objects: dict  # (row, col) -> (shape, color)
    seed: int = 0

    def caption(self) -> str:
        """``a <color> <shape>`` per object in row-major order, chained by relation."""
        cells = sorted(self.objects)
        parts = []
        for i, cell in enumerate(cells):
            shape, color = self.objects[cell]
            if i:
                prev = cells[i - 1]
                parts.append("left of" if prev[0] == cell[0] else "above")
            parts.append(f"a {color} {shape}")
        return " ".join(parts)


# Orthonormal codes keep every planted word direction separable by a dot product.
_CODE_NAMES = SHAPES + COLORS + ("empty",)


def planted_codes(feature_dim, code_seed=0):
    """Column ``i`` is the unit code of ``_CODE_NAMES[i]`` in the first ``feature_dim - 2`` channels."""
    n = len(_CODE_NAMES)
    if feature_dim - 2 < n:
        raise ValueError(f"feature_dim must be at least {n + 2}")
    rng = np.random.default_rng([code_seed, feature_dim])
    q, _ = np.linalg.qr(rng.standard_normal((feature_dim - 2, n)))
    return q


def planted_code(word, feature_dim, code_seed=0):
    q = planted_codes(feature_dim, code_seed)
    v = np.zeros(feature_dim)
    v[:-2] = q[:, _CODE_NAMES.index(word)]
    return v


def scene_features(scene: SceneSpec, feature_dim=16, noise=0.0, code_seed=0, rng=None):
    """Cell features: planted shape+color code plus two positional channels in [-1, 1]."""
    q = planted_codes(feature_dim, code_seed)
    grid = np.zeros((scene.rows, scene.cols, feature_dim))
    for r in range(scene.rows):
        for c in range(scene.cols):
            obj = scene.objects.get((r, c))
            if obj is None:
                grid[r, c, :-2] = q[:, _CODE_NAMES.index("empty")]
            else:
                grid[r, c, :-2] = q[:, SHAPES.index(obj[0])] + q[:, len(SHAPES) + COLORS.index(obj[1])]
            grid[r, c, -2] = 2.0 * r / max(scene.rows - 1, 1) - 1.0
            grid[r, c, -1] = 2.0 * c / max(scene.cols - 1, 1) - 1.0
    if noise and rng is not None:
        grid += noise * rng.standard_normal(grid.shape)
    return grid.astype(np.float32)


@dataclass
class Example:
    id: str
    features: FeatureMaps
    captions: list[str]


def generate_synthetic(seed, n_scenes, grid_w=3, grid_h=3, *, max_objects=2,
                       feature_dim=16, noise=0.05, multi_scale=False, code_seed=0):
    """Deterministic scene/caption/feature triples.

    With ``multi_scale`` each scene also gets a fine grid (every cell split
    2x2, own noise) and a coarse grid (2x2-pooled), giving three scales.
    Returns ``(scenes, captions, feature_maps)``.
    """
    if grid_w < 1 or grid_h < 1:
        raise ValueError("grid dims must be >= 1")
    rng = np.random.default_rng([seed, 7919])
    cells = [(r, c) for r in range(grid_h) for c in range(grid_w)]
    scenes, captions, fms = [], [], []
    for _ in range(n_scenes):
        k = int(rng.integers(1, min(max_objects, len(cells)) + 1))
        chosen = rng.choice(len(cells), size=k, replace=False)
        objects = {
            cells[i]: (SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))])
            for i in sorted(chosen)
        }
        scene = SceneSpec(grid_h, grid_w, objects, seed)
        base = scene_features(scene, feature_dim, noise, code_seed, rng)
        if multi_scale:
            fine = np.repeat(np.repeat(base, 2, axis=0), 2, axis=1)
            fine = (fine + noise * rng.standard_normal(fine.shape)).astype(np.float32)
            coarse = avg_pool2(base).astype(np.float32)
            grids = [fine, base, coarse]
        else:
            grids = [base]
        scenes.append(scene)
        captions.append(scene.caption())
        fms.append(FeatureMaps(grids))
    return scenes, captions, fms


def synthetic_examples(seed, n_scenes, prefix="scene", **kw) -> list[Example]:
    _, caps, fms = generate_synthetic(seed, n_scenes, **kw)
    return [Example(f"{prefix}{seed}-{i:05d}", fm, [c]) for i, (c, fm) in enumerate(zip(caps, fms))]


# -- manifests ----------------------------------------------------------------

def write_dataset(directory, examples, name="manifest"):
    """Write ``<name>.jsonl`` plus one GHAF file per example under ``directory``."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    with open(directory / f"{name}.jsonl", "w") as f:
        for ex in examples:
            rel = f"features/{ex.id}.ghaf"
            write_ghaf(directory / rel, ex.features)
            f.write(json.dumps({"id": ex.id, "features": rel, "captions": ex.captions}) + "\n")


def read_manifest(path) -> list[Example]:
    path = Path(path)
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Example(rec["id"], read_ghaf(path.parent / rec["features"]), list(rec["captions"])))
    return out


# -- batching -----------------------------------------------------------------

@dataclass
class CaptionBatch:
    tokens: np.ndarray  # [B, T] int64, <start> ... <end> <pad>*
    mask: np.ndarray  # [B, T] bool, True on non-pad
    grids: list[np.ndarray]  # per grid id: [B, rows, cols, D]
    ids: list[str]

    @property
    def inputs(self):
        return self.tokens[:, :-1]

    @property
    def targets(self):
        return self.tokens[:, 1:]

    @property
    def target_mask(self):
        return self.mask[:, 1:]


def encode_caption(vocab, caption, max_len):
    """``<start> words <end>`` with the words truncated so the total is at most ``max_len``."""
    ids = vocab.encode(caption)[: max(max_len - 2, 0)]
    return [START_ID] + ids + [END_ID]


def stack_grids(feature_maps):
    n = len(feature_maps[0].grids)
    return [np.stack([fm.grids[g] for fm in feature_maps]) for g in range(n)]


def collate(pairs, vocab, max_len):
    seqs = [encode_caption(vocab, cap, max_len) for _, cap in pairs]
    T = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return CaptionBatch(tokens, tokens != PAD_ID, stack_grids([ex.features for ex, _ in pairs]),
                        [ex.id for ex, _ in pairs])


def caption_pairs(dataset):
    return [(ex, cap) for ex in dataset for cap in ex.captions]


def batch_order(n, shuffle_seed, epoch=0):
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def make_batches(dataset, vocab, batch_size, max_len=22, shuffle_seed=None, epoch=0):
    """Yield ``CaptionBatch`` objects, one (image, caption) pair per row."""
    pairs = caption_pairs(dataset)
    order = batch_order(len(pairs), shuffle_seed, epoch)
    for i in range(0, len(order), batch_size):
        yield collate([pairs[j] for j in order[i:i + batch_size]], vocab, max_len)
