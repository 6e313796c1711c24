"""Command-line entry point: ``fervgg {train,sweep,finetune,eval,saliency,stats,synth}``.

Failures print one line ``error<TAB>category=<name><TAB><message>`` to
stderr and exit with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from typing import Dict, List, Optional

import numpy as np

from . import plots
from .config import RunConfig, parse_overrides, read_config, scaled_model_overrides
from .data import N_CLASSES, DatasetSizeWarning, read_csv, stats_table, synthetic_records, write_csv
from .errors import ConfigError, FerError
from .model import build, load_checkpoint, save_checkpoint
from .optim import KINDS as OPTIMIZERS
from .saliency import read_image, record_saliency, saliency, superimpose, write_triptych
from .sched import make_scheduler
from .tensor import SeededRng
from .train import evaluate_records, fine_tune, run_experiment, split_records

log = logging.getLogger("fervgg")

EXIT_CODES = {"input": 3, "config": 4, "numeric": 5, "io": 6, "internal": 1}

SCHEDULERS = ("constant", "rlrp", "cosine", "cosine-wr", "onecycle", "steplr")
SPLIT_ALIASES = {"train": "train_split", "val": "val_split", "test": "test_split"}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- shared helpers ----------------------------------------------------------

def _config(args, extra: Optional[Dict[str, str]] = None) -> RunConfig:
    overrides = {}
    if getattr(args, "scale_model", False):
        overrides.update(scaled_model_overrides())
    overrides.update(parse_overrides(getattr(args, "set", None) or []))
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = str(args.epochs)
    if getattr(args, "limit_per_class", None) is not None:
        overrides["data.limit_per_class"] = str(args.limit_per_class)
    overrides.update(extra or {})
    cfg = read_config(getattr(args, "config", None), overrides)
    make_scheduler(cfg.sched, cfg.train.epochs)  # reject unusable schedules before any output exists
    return cfg


def _records(path):
    if not os.path.isfile(path):
        raise CliError("input", f"data file not found: {path}")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DatasetSizeWarning)
        records, counts = read_csv(path)
    for w in caught:
        log.warning("%s", w.message)
    log.info("loaded %d records: %s", len(records), counts)
    return records


def _prepare_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {path}: {exc}") from None


def _echo(cfg: RunConfig, out_dir):
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.to_ini())


def _figures(result, out_dir):
    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    plots.learning_curves(result.metrics, os.path.join(fig_dir, "curves.png"))
    if result.test is not None:
        plots.confusion_matrix(result.test.confusion.counts, os.path.join(fig_dir, "confusion.png"))


# -- subcommands -------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    records = _records(args.data)
    _prepare_out(args.out)
    _echo(cfg, args.out)
    result = run_experiment(cfg, records, args.out)
    if not args.no_figures:
        _figures(result, args.out)
    test = f"{result.test.accuracy:.6f}" if result.test else "-"
    print(f"best_val_acc\t{result.best_val_acc:.6f}\ttest_acc\t{test}")
    return 0


def sweep_plan(axis: str, base: RunConfig):
    """``(run name, overrides)`` per run: 7 optimizers x {constant 0.001, plateau from 0.01},
    or the 6 schedulers from 0.01 with Nesterov SGD."""
    plan = []
    if axis == "optimizer":
        for kind in OPTIMIZERS:
            plan.append((f"{kind}_constant", {"optim.kind": kind, "sched.kind": "constant", "sched.lr0": "0.001"}))
            plan.append((f"{kind}_rlrp", {"optim.kind": kind, "sched.kind": "rlrp", "sched.lr0": "0.01"}))
    elif axis == "scheduler":
        for kind in SCHEDULERS:
            plan.append((kind, {"optim.kind": "sgd-nesterov", "sched.kind": kind, "sched.lr0": "0.01"}))
    else:
        raise CliError("config", f"unknown sweep axis {axis!r}")
    return plan


SWEEP_COLUMNS = ("run", "optimizer", "scheduler", "lr0", "status", "best_val_acc", "final_val_acc", "test_acc")


def cmd_sweep(args) -> int:
    base = _config(args)
    records = _records(args.data)
    plan = sweep_plan(args.axis, base)
    runs = [(name, _config(args, extra)) for name, extra in plan]
    _prepare_out(args.out)
    _echo(base, args.out)
    rows = []
    for name, cfg in runs:
        run_dir = os.path.join(args.out, name)
        _prepare_out(run_dir)
        _echo(cfg, run_dir)
        row = {"run": name, "optimizer": cfg.optim.kind, "scheduler": cfg.sched.kind,
               "lr0": repr(cfg.sched.lr0), "status": "ok",
               "best_val_acc": "-", "final_val_acc": "-", "test_acc": "-"}
        try:
            result = run_experiment(cfg, records, run_dir)
            row["best_val_acc"] = f"{result.best_val_acc:.6f}"
            row["final_val_acc"] = f"{result.metrics[-1].val_acc:.6f}"
            if result.test is not None:
                row["test_acc"] = f"{result.test.accuracy:.6f}"
        except FerError as exc:
            row["status"] = f"error:{exc.category}"
            log.error("run %s failed: %s", name, exc)
        rows.append(row)
        print("\t".join(row[c] for c in SWEEP_COLUMNS), flush=True)
    with open(os.path.join(args.out, "summary.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(row[c] for c in SWEEP_COLUMNS) + "\n")
    if not args.no_figures:
        plots.sweep_bars(rows, args.axis, os.path.join(args.out, "summary.png"))
    return 0


def _load_model(path, cfg: Optional[RunConfig] = None):
    if not os.path.isfile(path):
        raise CliError("input", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_finetune(args) -> int:
    cfg = _config(args)
    model, _ = _load_model(args.checkpoint)
    cfg = cfg.replace(model=model.config)
    records = _records(args.data)
    _prepare_out(args.out)
    _echo(cfg, args.out)
    result = fine_tune(model, cfg, records, args.scheduler, args.merge_val, args.out)
    if not args.no_figures:
        _figures(result, args.out)
    test = f"{result.test.accuracy:.6f}" if result.test else "-"
    print(f"scheduler\t{args.scheduler}\tmerge_val\t{int(args.merge_val)}\ttest_acc\t{test}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _ = _load_model(args.checkpoint)
    cfg = cfg.replace(model=model.config)
    records = _records(args.data)
    split = getattr(cfg.data, SPLIT_ALIASES[args.split])
    subset = [r for r in records if r.split == split]
    if cfg.data.limit_per_class > 0:
        subset = split_records(records, cfg).__dict__[args.split]
    if not subset:
        raise CliError("input", f"split {split!r} has no records")
    result = evaluate_records(model, subset, cfg)
    print(f"accuracy\t{result.accuracy:.6f}\trecords\t{result.confusion.total}")
    for row in result.confusion.counts:
        print("\t".join(map(str, row)))
    if args.figure:
        plots.confusion_matrix(result.confusion.counts, args.figure)
    return 0


def cmd_saliency(args) -> int:
    model, _ = _load_model(args.checkpoint)
    items = []
    if args.image:
        if args.label is None:
            raise CliError("config", "--image needs --label")
        if not os.path.isfile(args.image):
            raise CliError("input", f"image not found: {args.image}")
        try:
            img = read_image(args.image)
        except ValueError as exc:
            raise CliError("input", f"unreadable image {args.image}: {exc}") from None
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise CliError("input", "image must be square grayscale (P5)")
        size = model.config.input_size
        if img.shape[0] == size:
            sal = saliency(model, img, args.label, args.target)
        elif img.shape == (48, 48):
            from .data import FerRecord
            rec = FerRecord(args.label, np.floor(img * 255 + 0.5).astype(np.uint8), "Training")
            img, sal = record_saliency(model, rec, size, args.target)
        else:
            raise CliError("input", f"image must be {size}x{size} or 48x48, got {img.shape}")
        items.append((os.path.splitext(os.path.basename(args.image))[0], img, sal))
    else:
        if not args.data or not args.record_index:
            raise CliError("config", "give --image or --data with --record-index")
        records = _records(args.data)
        for idx in args.record_index:
            if not 0 <= idx < len(records):
                raise CliError("input", f"record index {idx} out of range (0..{len(records) - 1})")
            img, sal = record_saliency(model, records[idx], model.config.input_size, args.target)
            items.append((f"record{idx:05d}", img, sal))
    _prepare_out(args.out)
    for stem, img, sal in items:
        paths = write_triptych(img, sal, args.out, stem, args.alpha)
        if args.figure:
            plots.saliency_triptych(img, sal, superimpose(sal, img, args.alpha),
                                    os.path.join(args.out, f"{stem}_triptych.png"))
        print("\t".join(paths))
    return 0


def cmd_stats(args) -> int:
    records = _records(args.data)
    for line in stats_table(records):
        print(line)
    return 0


def cmd_synth(args) -> int:
    per_class = {"Training": args.per_class, "PublicTest": args.val_per_class, "PrivateTest": args.test_per_class}
    records = synthetic_records(per_class, seed=args.seed)
    parent = os.path.dirname(os.path.abspath(args.out))
    _prepare_out(parent)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_csv(records, fh)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_init(args) -> int:
    """Write a freshly initialized checkpoint (useful as an untrained baseline)."""
    cfg = _config(args)
    model = build(cfg.model, SeededRng(cfg.train.seed).child(0))
    parent = os.path.dirname(os.path.abspath(args.out))
    _prepare_out(parent)
    save_checkpoint(model, args.out, {"epoch": -1})
    print(f"parameters\t{model.parameter_count()}")
    return 0


# -- parser ------------------------------------------------------------------

def _common_config(p, seed=True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    if seed:
        p.add_argument("--seed", type=int)
    p.add_argument("--limit-per-class", type=int, help="keep the first N records per class and split")
    p.add_argument("--scale-model", action="store_true", help="use stage widths 8/16/32/64 and FC 64/32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fervgg", description="VGG-style facial emotion recognition engine")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-figures", action="store_true")
    _common_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="optimizer or scheduler sweep")
    p.add_argument("--axis", choices=("optimizer", "scheduler"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-figures", action="store_true")
    _common_config(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with a cosine schedule")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheduler", choices=("cosine", "cosine-wr"), default="cosine")
    p.add_argument("--merge-val", action="store_true", help="train on training + validation splits")
    p.add_argument("--no-figures", action="store_true")
    _common_config(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="ten-crop evaluation with confusion matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--figure", help="also render the confusion matrix to this image file")
    _common_config(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("saliency", help="saliency map, original and overlay as netpbm files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data")
    p.add_argument("--record-index", type=int, action="append")
    p.add_argument("--image", help="P5 image, 48x48 or model input size")
    p.add_argument("--label", type=int, choices=range(N_CLASSES))
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--target", choices=("loss", "logit"), default="loss")
    p.add_argument("--figure", action="store_true", help="also render a PNG triptych")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("stats", help="per-class per-split record counts")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic FER-format CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=8)
    p.add_argument("--val-per-class", type=int, default=4)
    p.add_argument("--test-per-class", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init", help="write a freshly initialized checkpoint")
    p.add_argument("--out", required=True)
    _common_config(p)
    p.set_defaults(func=cmd_init)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except ConfigError as exc:
        category, message = "config", str(exc)
    except FerError as exc:
        category, message = exc.category, str(exc)
    except OSError as exc:
        category, message = "io", str(exc)
    print(f"error\tcategory={category}\t{message}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
