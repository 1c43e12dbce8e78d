"""Command-line entry point: ``ghacap <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import corpus as C
from . import tensor as tn
from .gradcheck import TOLERANCE, grad_check_model
from .inference import BEAM_WIDTH, MAX_LEN, decode
from .model import ConfigError, parse_label
from .train import (CheckpointError, TrainConfig, TrainingError, evaluate_bleu, evaluate_loss,
                    load_checkpoint, train)
from .viz import DEFAULT_VIEW, export_attention, gate_report

# Desk runs train a freshly initialised projection, so both groups use the faster rate.
DESK_TRAIN = {"lr_encoder": 3e-3, "lr_rest": 3e-3, "epochs": 10}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _emit(obj, out=None):
    line = json.dumps(obj, sort_keys=True)
    if out is None:
        print(line)
    else:
        out.write(line + "\n")


def _thresholds(text):
    try:
        v, c = (float(x) for x in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers, e.g. 0.65,0.25") from e
    return v, c


def _split_path(data, split):
    path = Path(data)
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.exists():
        raise CliError("io", f"no such dataset file: {path}")
    return path


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    kw = dict(grid_w=args.grid_w, grid_h=args.grid_h, max_objects=args.max_objects,
              feature_dim=args.feature_dim, noise=args.noise, multi_scale=args.multi_scale)
    out = Path(args.out)
    counts = {}
    for offset, split, n in ((0, "train", args.n_train), (1000, "val", args.n_val), (2000, "test", args.n_test)):
        if n <= 0:
            continue
        examples = C.synthetic_examples(args.seed + offset, n, prefix=f"{split}", **kw)
        C.write_dataset(out, examples, split)
        counts[split] = n
    _emit({"out": str(out), "splits": counts})


def _train_config(args):
    cfg = {}
    if args.desk or (args.variant and parse_label(args.variant)[4]):
        cfg.update(DESK_TRAIN)
    if args.config:
        try:
            cfg.update(json.loads(Path(args.config).read_text()))
        except (OSError, ValueError) as e:
            raise CliError("io", f"cannot read config {args.config}: {e}") from e
    flags = {
        "variant": args.variant, "seed": args.seed, "epochs": args.epochs, "batch_size": args.batch,
        "lr_encoder": args.lr_encoder, "lr_rest": args.lr_rest, "beam": args.beam,
        "decode_max_len": args.max_len, "checkpoint_dir": args.out, "max_steps": args.max_steps,
        "clip_norm": args.clip_norm, "keep_prob": args.keep_prob,
    }
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.desk:
        cfg["desk"] = True
    if args.data:
        cfg["train_data"] = str(_split_path(args.data, "train"))
        val = Path(args.data) / "val.jsonl" if Path(args.data).is_dir() else None
        if val is not None and val.exists():
            cfg["val_data"] = str(val)
    return TrainConfig.from_dict(cfg)


def cmd_train(args):
    cfg = _train_config(args)
    parse_label(cfg.variant)
    train_set = val_set = None
    if not cfg.train_data:
        multi = cfg.variant.startswith("MS-")
        train_set = C.synthetic_examples(cfg.seed, args.n_train, prefix="train", multi_scale=multi)
        val_set = C.synthetic_examples(cfg.seed + 1000, args.n_val, prefix="val", multi_scale=multi)
    result = train(cfg, train_set, val_set, resume=args.resume)
    _emit({
        "variant": result.model.cfg.label,
        "steps": result.optimizer.t,
        "final_loss": next((r["loss"] for r in reversed(result.history) if r["split"] == "train"), None),
        "best_bleu4": result.best_bleu4,
        "best": str(result.best_path) if result.best_path else None,
        "last": str(result.last_path) if result.last_path else None,
    })


def _load(path):
    try:
        ck = load_checkpoint(path)
    except FileNotFoundError as e:
        raise CliError("io", f"no such checkpoint: {path}") from e
    return ck, ck.build_model()


def _feature_items(args):
    items = []
    for f in args.features or []:
        items.append((Path(f).stem, C.read_ghaf(f)))
    if getattr(args, "data", None):
        for ex in C.read_manifest(_split_path(args.data, args.split)):
            items.append((ex.id, ex.features))
    if not items:
        raise CliError("usage", "give --features or --data")
    return items


def cmd_caption(args):
    ck, model = _load(args.checkpoint)
    out = open(args.out, "w") if args.out else None
    try:
        with tn.no_grad():
            for ident, fm in _feature_items(args):
                cap = decode(model, fm, args.beam, args.max_len)
                _emit({"id": ident, "caption": " ".join(ck.vocab.decode(cap.tokens)),
                       "logprob": round(cap.logprob, 6)}, out)
    finally:
        if out:
            out.close()


def cmd_evaluate(args):
    ck, model = _load(args.checkpoint)
    data = C.read_manifest(_split_path(args.data, args.split))
    scores = evaluate_bleu(model, data, ck.vocab, args.beam, args.max_len)
    result = {f"bleu{n + 1}": round(s, 6) for n, s in enumerate(scores)}
    result["loss"] = round(evaluate_loss(model, data, ck.vocab), 6)
    result["n"] = len(data)
    _emit(result)


def cmd_inspect(args):
    ck, model = _load(args.checkpoint)
    summary = {"variant": ck.config.label, "family": ck.config.family, "step": ck.step,
               "epoch": ck.epoch, "parameters": model.n_parameters(), "vocab": len(ck.vocab),
               "metrics": ck.metrics}
    if not args.features:
        _emit(summary)
        return
    out = Path(args.out or "inspect")
    out.mkdir(parents=True, exist_ok=True)
    v_thr, c_thr = args.thresholds
    for ident, fm in _feature_items(args):
        with tn.no_grad():
            cap = decode(model, fm, args.beam, args.max_len)
            tokens = [C.START_ID] + cap.tokens
            inputs = tokens[:-1]
            _, diag = model.forward([g[None] for g in fm.grids], np.array([inputs]), diagnostics=True)
        words = ck.vocab.decode(cap.tokens, strip=False)[: len(inputs)]
        maps = []
        for l, a in enumerate(diag.attention):
            if a is None:
                continue
            rows, cols = diag.grid_shapes[l]
            for t in range(a.shape[1]):
                prefix = out / f"{ident}_l{l}_t{t:02d}"
                export_attention(a[0, t].reshape(rows, cols), args.target, args.target, prefix, args.mode)
                maps.append(prefix.name)
        stats = gate_report(diag, (v_thr, c_thr), words)
        (out / f"{ident}_gates.json").write_text(json.dumps(stats.to_json(), sort_keys=True))
        _emit(dict(summary, id=ident, caption=" ".join(ck.vocab.decode(cap.tokens)),
                   attention_maps=len(maps), gates=f"{ident}_gates.json"))


def cmd_grad_check(args):
    errors = grad_check_model(args.variant, seed=args.seed)
    worst = max(errors.values())
    for name, err in errors.items():
        _emit({"param": name, "max_rel_error": err, "pass": err <= TOLERANCE})
    _emit({"variant": args.variant, "max_rel_error": worst, "tolerance": TOLERANCE,
           "pass": worst <= TOLERANCE})
    return 0 if worst <= TOLERANCE else 1


# -- parser -------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="ghacap", description="Gated hierarchical attention captioning toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic scene/caption dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-val", type=int, default=200)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--grid-w", type=int, default=3)
    g.add_argument("--grid-h", type=int, default=3)
    g.add_argument("--max-objects", type=int, default=2)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--multi-scale", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    t.add_argument("--variant", default=None)
    t.add_argument("--desk", action="store_true")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr-encoder", type=float)
    t.add_argument("--lr-rest", type=float)
    t.add_argument("--beam", type=int)
    t.add_argument("--max-len", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--keep-prob", type=float)
    t.add_argument("--out")
    t.add_argument("--data", help="dataset directory from gen-data (synthetic corpus if omitted)")
    t.add_argument("--config", help="JSON file of TrainConfig fields; flags override it")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--n-train", type=int, default=2000)
    t.add_argument("--n-val", type=int, default=200)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("caption", cmd_caption, "caption feature files"),
                                 ("evaluate", cmd_evaluate, "BLEU on a dataset split"),
                                 ("inspect", cmd_inspect, "checkpoint summary, attention maps and gate stats")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--beam", type=int, default=BEAM_WIDTH)
        c.add_argument("--max-len", type=int, default=MAX_LEN)
        c.add_argument("--data", required=name == "evaluate")
        c.add_argument("--split", default="test")
        if name != "evaluate":
            c.add_argument("--features", nargs="*")
            c.add_argument("--out")
        if name == "inspect":
            c.add_argument("--thresholds", type=_thresholds, default=(0.65, 0.25))
            c.add_argument("--target", type=int, default=DEFAULT_VIEW)
            c.add_argument("--mode", choices=("bilinear", "nearest"), default="bilinear")
        c.set_defaults(func=func)

    gc = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    gc.add_argument("--variant", default="GHA-2-3-desk")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except CliError as e:
        kind, msg = e.kind, str(e)
    except (ConfigError, TrainingError) as e:
        kind, msg = "config" if isinstance(e, ConfigError) else "training", str(e)
    except (CheckpointError, C.FeatureFileError) as e:
        kind, msg = "format", str(e)
    except OSError as e:
        kind, msg = "io", str(e)
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return 2 if kind == "usage" else 1


if __name__ == "__main__":
    sys.exit(main())
