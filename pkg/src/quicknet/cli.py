"""Command-line front end: ``python -m quicknet <subcommand>``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import arch as A
from . import compression as C
from . import data as D
from . import serialize as S
from .bench import bench
from .train import TrainConfig, evaluate, history_csv, train

log = logging.getLogger("quicknet")

CONFIGS = {"reference": A.reference_config, "desk": A.desk_config}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def load_config(spec: str) -> tuple[A.ArchConfig, dict]:
    """Architecture from a preset name or a JSON file; returns it with any ``train`` overrides."""
    if spec in CONFIGS:
        return CONFIGS[spec](), {}
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"unknown config {spec!r} (presets: {', '.join(CONFIGS)})")
    raw = json.loads(path.read_text())
    train_opts = raw.pop("train", {})
    preset = raw.pop("preset", None)
    base = dataclasses.asdict(CONFIGS[preset]()) if preset else {}
    base.update(raw)
    if "input_shape" in base:
        base["input_shape"] = tuple(base["input_shape"])
    return A.ArchConfig(**base), train_opts


def _data_dir(args) -> str:
    d = args.data or D.default_data_dir()
    if not d:
        raise UsageError("no data directory: pass --data or set QNET_DATA")
    return d


def _load_any_model(path: str) -> A.ModelGraph:
    raw = Path(path).read_bytes()
    if raw[:4] == C.MAGIC:
        return C.decompress_model(raw)
    return S.loads_model(raw)


def _norm_of(g: A.ModelGraph) -> tuple:
    if g.norm is None:
        raise ValueError("model carries no standardization constants; train it with this tool "
                         "or set ModelGraph.norm before saving")
    return g.norm


def cmd_summarize(args) -> int:
    if args.model:
        g = _load_any_model(args.model)
    else:
        cfg, _ = load_config(args.config)
        g = A.build_quicknet(cfg, 0)
    sys.stdout.write(A.summarize(g))
    return 0


def cmd_train(args) -> int:
    cfg, overrides = load_config(args.config)
    opts = dict(overrides)
    for flag, key in (("epochs", "max_epochs"), ("lr", "lr"), ("batch", "batch_size"), ("seed", "seed"),
                      ("patience", "patience"), ("fixed_epoch", "fixed_epoch"), ("dropout", "dropout_rate")):
        val = getattr(args, flag)
        if val is not None:
            opts[key] = val
    if args.no_augment:
        opts.update(hflip=False, shift_px=0)
    tcfg = TrainConfig(**opts)
    ds = D.load_cifar10(_data_dir(args), "train", limit=args.limit)
    g = A.build_quicknet(dataclasses.replace(cfg, dropout_rate=tcfg.dropout_rate), tcfg.seed)
    g.norm = (ds.mean, ds.std)
    best, history = train(g, ds, tcfg)
    S.save_model(best, args.model)
    hist_path = args.history or f"{args.model}.history.csv"
    Path(hist_path).write_text(history_csv(history))
    if args.folded:
        S.save_model(A.fold_for_inference(best), args.folded)
    best_acc = max((h["val_acc"] for h in history), default=float("nan"))
    print(f"epochs={len(history)} best_val_acc={best_acc:.4f} model={args.model} history={hist_path}")
    return 0


def cmd_eval(args) -> int:
    g = _load_any_model(args.model)
    ds = D.load_cifar10(_data_dir(args), args.split, norm=_norm_of(g), limit=args.limit)
    acc, loss = evaluate(g, ds)
    print(f"accuracy={acc:.6f} loss={loss:.6f} n={len(ds)}")
    return 0


def cmd_bench(args) -> int:
    if args.model:
        g = _load_any_model(args.model)
    else:
        cfg, _ = load_config(args.config)
        g = A.build_quicknet(cfg, 0)
    if g.mode == "train":
        g = A.fold_for_inference(g)
    res = bench(g, threads=args.threads, duration_s=args.duration, warmup_s=args.warmup)
    sys.stdout.write(res.format())
    if args.json:
        Path(args.json).write_text(res.to_json())
    return 0


def cmd_compress(args) -> int:
    g = _load_any_model(args.model)
    if g.mode == "train":
        g = A.fold_for_inference(g)
    eval_set = None
    if args.data or D.default_data_dir():
        eval_set = D.load_cifar10(_data_dir(args), "test", norm=_norm_of(g), limit=args.limit)
    archive, report = C.compress_model(g, args.sparsity, args.scheme, eval_set, k=args.k, seed=args.seed or 0)
    Path(args.out).write_bytes(archive)
    sys.stdout.write(report.format())
    return 0


def cmd_decompress(args) -> int:
    g = C.decompress_model(Path(args.model).read_bytes())
    S.save_model(g, args.out)
    print(f"wrote {args.out} ({len(g)} layers)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quicknet", description="QuickNet CNN engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, model_required=False):
        sp.add_argument("--config", default="reference", help="preset name or JSON file")
        sp.add_argument("--data", help="CIFAR-10 binary directory (default $QNET_DATA)")
        sp.add_argument("--model", required=model_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--limit", type=int, help="use only the first N records")

    sp = sub.add_parser("summarize", help="print the architecture table")
    common(sp)
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("train", help="train on CIFAR-10")
    common(sp, model_required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--fixed-epoch", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--history", help="history CSV path (default <model>.history.csv)")
    sp.add_argument("--folded", help="also write the folded inference model here")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a model on CIFAR-10")
    common(sp, model_required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="batch-1 throughput")
    common(sp)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--duration", type=float, default=5.0)
    sp.add_argument("--warmup", type=float, default=2.0)
    sp.add_argument("--json", help="also write the result as JSON")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("compress", help="prune, quantize and Huffman-code a model")
    common(sp, model_required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sparsity", type=float, default=0.5)
    sp.add_argument("--scheme", choices=tuple(C.SCHEMES), default="linear8")
    sp.add_argument("--k", type=int, default=256, help="codebook size")
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="expand a QNTC archive into a QNET model")
    common(sp, model_required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompress)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().rstrip() + "\nquicknet: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"quicknet: error: {exc}", file=sys.stderr)
        return 1
