"""Adam with two learning-rate groups, the training loop, and GHAC checkpoints."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corpus as C
from . import tensor as tn
from .inference import MAX_LEN, bleu, decode
from .model import CaptionModel, ConfigError, ModelConfig, build_variant, check_attention_invariants

log = logging.getLogger(__name__)

GHAC_MAGIC = b"GHAC"
GHAC_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_encoder: float = 1e-5
    lr_rest: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    variant: str = "GHA-6-3"
    desk: bool = False
    train_data: str | None = None
    val_data: str | None = None
    checkpoint_dir: str | None = None
    grad_check: bool = False
    max_len: int = 22
    max_steps: int | None = None
    clip_norm: float | None = None
    keep_prob: float | None = None
    beam: int = 3
    decode_max_len: int = MAX_LEN
    min_count: int = 1
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_encoder <= 0 or self.lr_rest <= 0:
            raise ConfigError("learning rates must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizer ----------------------------------------------------------------

def adam_step(param, grad, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected Adam update; returns new ``(param, m, v)`` arrays."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params, groups, lrs, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        assigned = [n for names in groups.values() for n in names]
        if sorted(assigned) != sorted(params) or len(set(assigned)) != len(assigned):
            raise ConfigError("learning-rate groups must partition the parameters")
        self.params = params
        self.lr_of = {n: lrs[g] for g, names in groups.items() for n in names}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        grads = {}
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {n!r} at step {self.t + 1}")
            grads[n] = g
        if self.clip_norm:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {n: g * g.dtype.type(scale) for n, g in grads.items()}
        self.t += 1
        for n, p in self.params.items():
            dt = p.data.dtype.type
            p.data, self.m[n], self.v[n] = adam_step(
                p.data, grads[n], self.m[n], self.v[n], dt(self.lr_of[n]),
                dt(self.beta1), dt(self.beta2), dt(self.eps), self.t)


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: C.Vocabulary
    params: dict
    moments: dict = field(default_factory=dict)  # {"m": {...}, "v": {...}}
    step: int = 0
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    version: int = GHAC_VERSION

    def build_model(self):
        model = CaptionModel(self.config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, ck: Checkpoint):
    blobs, directory, offset = [], {}, 0
    named = [(f"param/{n}", a) for n, a in ck.params.items()]
    for kind in ("m", "v"):
        named += [(f"adam_{kind}/{n}", a) for n, a in ck.moments.get(kind, {}).items()]
    for name, arr in named:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "config": ck.config.to_json(),
        "vocab": ck.vocab.to_json(),
        "step": ck.step,
        "epoch": ck.epoch,
        "metrics": ck.metrics,
        "train_config": ck.train_config,
        "tensors": directory,
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(GHAC_MAGIC)
        f.write(struct.pack("<II", GHAC_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def resolve_checkpoint(path):
    path = Path(path)
    if not path.exists() and path.with_suffix(".ghac").exists():
        return path.with_suffix(".ghac")
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = resolve_checkpoint(path).read_bytes()
    if buf[:4] != GHAC_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != GHAC_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(buf[12:12 + hlen])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable header") from e
    base = 12 + hlen
    params, moments = {}, {"m": {}, "v": {}}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = base + entry["offset"]
        if start + 4 * count > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
        kind, pname = name.split("/", 1)
        if kind == "param":
            params[pname] = arr
        else:
            moments[kind.removeprefix("adam_")][pname] = arr
    return Checkpoint(
        ModelConfig.from_json(header["config"]), C.Vocabulary.from_json(header["vocab"]),
        params, moments, header["step"], header["epoch"], header["metrics"], header["train_config"], version)


def restore(model: CaptionModel, ck: Checkpoint, optimizer: Adam | None = None):
    """Copy checkpoint state into ``model`` (and ``optimizer``); shape or name conflicts raise."""
    model.load_state_dict(ck.params)
    if optimizer is not None and ck.moments.get("m"):
        optimizer.m = {n: a.copy() for n, a in ck.moments["m"].items()}
        optimizer.v = {n: a.copy() for n, a in ck.moments["v"].items()}
        optimizer.t = ck.step


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: CaptionModel
    vocab: C.Vocabulary
    history: list
    best_bleu4: float = -1.0
    best_path: Path | None = None
    last_path: Path | None = None
    optimizer: Adam | None = None


def evaluate_loss(model, dataset, vocab, batch_size=64, max_len=22):
    """Masked per-token cross-entropy in eval mode over every (image, caption) pair."""
    total, count = 0.0, 0
    with tn.no_grad():
        for batch in C.make_batches(dataset, vocab, batch_size, max_len):
            loss, _ = model.loss(batch)
            n = int(batch.target_mask.sum())
            total += float(loss.item()) * n
            count += n
    return total / max(count, 1)


def evaluate_bleu(model, dataset, vocab, beam=3, max_len=MAX_LEN):
    cands, refs = [], []
    with tn.no_grad():
        for ex in dataset:
            cap = decode(model, ex.features, beam, max_len)
            cands.append(vocab.decode(cap.tokens))
            refs.append([C.tokenize(r) for r in ex.captions])
    return bleu(cands, refs)


def _load_split(spec):
    if spec is None:
        return None
    path = Path(spec)
    if path.is_dir():
        path = path / "manifest.jsonl"
    return C.read_manifest(path)


def train(cfg: TrainConfig, train_set=None, val_set=None, vocab=None, model_config=None,
          resume=None, on_step=None, monitor=None):
    """Run the epoch loop; returns a ``TrainResult``.

    ``monitor(step, diagnostics)`` (if given) receives the forward diagnostics
    of every training step. ``on_step(step, loss)`` is called after each update.
    """
    train_set = train_set if train_set is not None else _load_split(cfg.train_data)
    val_set = val_set if val_set is not None else _load_split(cfg.val_data)
    if not train_set:
        raise TrainingError("no training data")
    ck = load_checkpoint(resume) if resume else None
    if vocab is None:
        vocab = ck.vocab if ck else C.build_vocab([c for ex in train_set for c in ex.captions], cfg.min_count)
    if model_config is None:
        if ck:
            model_config = ck.config
        else:
            overrides = {"vocab_size": len(vocab),
                         "feature_dims": [g.shape[-1] for g in train_set[0].features.grids]}
            if cfg.keep_prob is not None:
                overrides["keep_prob"] = cfg.keep_prob
            model_config = build_variant(cfg.variant, cfg.desk, **overrides)
    model = CaptionModel(model_config, seed=cfg.seed)
    opt = Adam(model.params, model.parameter_groups(),
               {"encoder": cfg.lr_encoder, "rest": cfg.lr_rest},
               cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm)
    step, start_epoch = 0, 0
    if ck:
        restore(model, ck, opt)
        step = ck.step
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    metrics_file = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "metrics.jsonl", "a" if ck else "w")
    result = TrainResult(model, vocab, [], optimizer=opt)
    if ck:
        result.best_bleu4 = ck.metrics.get("best_bleu4", -1.0)

    def emit(rec):
        result.history.append(rec)
        if metrics_file:
            metrics_file.write(json.dumps(rec) + "\n")
            metrics_file.flush()

    def snapshot(epoch, metrics):
        return Checkpoint(model.cfg, vocab, model.state_dict(), {"m": opt.m, "v": opt.v},
                          step, epoch, metrics, asdict(cfg))

    n_pairs = len(C.caption_pairs(train_set))
    per_epoch = math.ceil(n_pairs / cfg.batch_size)
    start_epoch, skip = divmod(step, per_epoch)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            for bi, batch in enumerate(C.make_batches(train_set, vocab, cfg.batch_size, cfg.max_len,
                                                      shuffle_seed=cfg.seed, epoch=epoch)):
                if epoch == start_epoch and bi < skip:
                    continue
                loss, diag = model.loss(batch, training=True, rng_key=(cfg.seed, step),
                                        diagnostics=monitor is not None)
                value = float(loss.item())
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at step {step + 1}")
                model.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                if monitor is not None:
                    monitor(step, diag)
                if on_step is not None:
                    on_step(step, value)
                if step % cfg.log_every == 0:
                    emit({"step": step, "epoch": epoch, "split": "train", "loss": value, "bleu4": None})
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            metrics = {"epoch": epoch, "step": step}
            if val_set:
                b = evaluate_bleu(model, val_set, vocab, cfg.beam, cfg.decode_max_len)
                vloss = evaluate_loss(model, val_set, vocab, max_len=cfg.max_len)
                emit({"step": step, "epoch": epoch, "split": "val", "loss": vloss, "bleu4": b[3]})
                metrics.update(val_loss=vloss, bleu=b)
                if b[3] > result.best_bleu4:
                    result.best_bleu4 = b[3]
                    if out_dir:
                        result.best_path = out_dir / "best.ghac"
                        save_checkpoint(result.best_path, snapshot(epoch, dict(metrics, best_bleu4=b[3])))
            metrics["best_bleu4"] = result.best_bleu4
            if out_dir:
                result.last_path = out_dir / "last.ghac"
                save_checkpoint(result.last_path, snapshot(epoch, metrics))
                if not val_set:
                    result.best_path = result.last_path
            log.info("epoch %d step %d %s", epoch, step, metrics)
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if metrics_file:
            metrics_file.close()
    return result


def invariant_monitor(problems: list, max_h: list):
    """Build a ``monitor`` callback that records attention and fusing-bound violations."""
    def monitor(step, diag):
        for msg in check_attention_invariants(diag):
            problems.append(f"step {step}: {msg}")
        hs = [np.abs(h).max() for h in diag.h[1:] if h is not None]
        if hs:
            max_h.append(float(max(hs)))
    return monitor
