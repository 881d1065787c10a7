"""Command-line entry point: ``starformer {synth,train,eval,export}``.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import replace

import numpy as np

from . import tensor as T
from .config import apply_overrides, load_run_config, read_mapping
from .darem import MaskConfig, build_regional_mask, importance_from_attention
from .data import (SyntheticSpec, _atomic_write, batch_iterator, generate_synthetic_motif, load_dataset,
                   rescale_time, split_and_normalize, stratified_split, write_dataset)
from .encoder import encoder_forward
from .errors import ConfigError, ContractError, FormatError, NumericError, StarformerError, ValidationError
from .losses import pooled_embedding
from .trainer import evaluate, history_csv, load_checkpoint, save_checkpoint, train_loop

log = logging.getLogger("starformer")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _global_flags(nested: bool) -> argparse.ArgumentParser:
    # nested copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if nested else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="YAML or JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                   help="dotted-key override, repeatable")
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--out", default=d(None), help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    flags = _global_flags(nested=True)
    parser = argparse.ArgumentParser(prog="starformer", parents=[_global_flags(nested=False)],
                                     description="Two-tower transformer with attention-guided regional masking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[flags], help="generate a synthetic motif dataset")
    p.add_argument("spec", nargs="?", help="synthetic spec file (defaults to --config)")

    sub.add_parser("train", parents=[flags], help="train a model from a run config")

    p = sub.add_parser("eval", parents=[flags], help="evaluate a checkpoint, metrics JSON on stdout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("export", parents=[flags], help="export embeddings, masks or importance scores as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--what", required=True, choices=("embeddings", "masks", "sigma"))
    p.add_argument("--batch-size", type=int, default=64)
    return parser


# synth -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    path = args.spec or args.config
    doc = read_mapping(path) if path else {}
    doc = apply_overrides(doc, args.overrides)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSpec(**doc)
    except TypeError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    if not args.out:
        raise ConfigError("synth needs --out")
    ds = generate_synthetic_motif(spec)
    write_dataset(ds, args.out)
    lengths = [s.length for s in ds.samples]
    print(f"M={len(ds)} C={ds.num_classes} D={ds.feature_dim} "
          f"length min={min(lengths)} mean={np.mean(lengths):g} max={max(lengths)}")
    return EXIT_OK


# train -------------------------------------------------------------------------

def cmd_train(args) -> int:
    # validate everything that does not depend on the data first
    run = load_run_config(args.config, args.overrides, seed=args.seed, out=args.out)
    if not run.data.get("path"):
        raise ConfigError("data.path is required")
    if not run.out:
        raise ConfigError("an output directory is required (out or --out)")
    ds = load_dataset(run.data["path"])
    run = load_run_config(args.config, args.overrides, seed=args.seed, out=args.out,
                          infer={"input_dim": ds.feature_dim, "num_classes": ds.num_classes})
    if run.train.model.input_dim != ds.feature_dim:
        raise ConfigError(f"model.input_dim={run.train.model.input_dim} but the data has {ds.feature_dim} features")
    if run.train.model.num_classes != ds.num_classes:
        raise ConfigError(f"model.num_classes={run.train.model.num_classes} but the data has {ds.num_classes}")
    max_len = max(s.length for s in ds.samples)
    if max_len > run.train.model.max_len:
        raise ConfigError(f"longest sequence ({max_len}) exceeds model.max_len={run.train.model.max_len}")

    train, val, test, norm = split_and_normalize(ds, run.data["ratios"], run.data["split_seed"])
    state, history = train_loop(train, val, run.train)
    state.normalizer = norm
    state.time_range = ds.time_range

    resolved = run.to_dict()
    staging = tempfile.mkdtemp(prefix=".staging-", dir=os.path.dirname(os.path.abspath(run.out)) or ".")
    try:
        save_checkpoint(state, os.path.join(staging, "checkpoint.strf"), extra_config={"data": run.data})
        _atomic_write(os.path.join(staging, "history.csv"), history_csv(history))
        _atomic_write(os.path.join(staging, "config.json"), json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        # raw, unnormalized splits so eval/export can be pointed at them
        idx = stratified_split(ds, run.data["ratios"], run.data["split_seed"])
        for name, ids in zip(("train", "val", "test"), idx):
            if ids:
                write_dataset(ds.subset(ids, f"{ds.name}-{name}"), os.path.join(staging, "splits", f"{name}.jsonl"))
        if os.path.isdir(run.out):
            shutil.rmtree(run.out)
        os.replace(staging, run.out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    summary = {"best_epoch": state.best_epoch, "best_val_accuracy": state.best_val_accuracy}
    if test is not None:
        summary["test"] = evaluate(test, state, use_best=True).to_dict()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# eval / export -----------------------------------------------------------------

def _load_for_inference(args):
    if not os.path.isfile(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    state = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, num_classes=state.config.model.num_classes)
    if args.config:
        # resolve the way train does, so an unchanged config reproduces the digest
        model_over = [o for o in args.overrides if not o.startswith("mask.")]
        run = load_run_config(args.config, model_over,
                              infer={"input_dim": ds.feature_dim, "num_classes": ds.num_classes})
        if run.train.model.digest() != state.config.model.digest():
            raise ConfigError("config digest mismatch: the checkpoint was trained with a different model config")
    if ds.feature_dim != state.config.model.input_dim:
        raise ConfigError(f"dataset has {ds.feature_dim} features, checkpoint expects {state.config.model.input_dim}")
    if state.time_range is not None:
        ds = rescale_time(ds, state.time_range)
    if state.normalizer is not None:
        ds = state.normalizer.apply(ds)
    return state, ds


def cmd_eval(args) -> int:
    state, ds = _load_for_inference(args)
    metrics = evaluate(ds, state)
    sys.stdout.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK


def _fmt(v: float) -> str:
    return repr(float(v))


def export_rows(state, ds, what: str, mask_cfg: MaskConfig | None = None, batch_size: int = 64):
    mc = state.config.model
    mask_cfg = mask_cfg or state.config.mask
    rows = []
    with T.precision(mc.np_dtype):
        for batch in batch_iterator(ds, batch_size, dtype=mc.np_dtype):
            Z, attn = encoder_forward(batch, state.params, mc, train=False)
            if what == "embeddings":
                emb = pooled_embedding(Z, batch.valid).data
                for sid, label, vec in zip(batch.ids, batch.labels, emb):
                    rows.append([sid, int(label), *map(_fmt, vec)])
                continue
            scores = importance_from_attention(attn, batch.valid)
            if what == "sigma":
                data = scores.sigma
            else:
                data = build_regional_mask(scores, replace(mask_cfg, strategy="darem")).masked.astype(int)
            for b, sid in enumerate(batch.ids):
                n = int(batch.lengths[b])
                vals = data[b, :n]
                rows.append([sid, *(map(_fmt, vals) if what == "sigma" else map(str, vals))])
    return rows


def cmd_export(args) -> int:
    if not args.out:
        raise ConfigError("export needs --out")
    state, ds = _load_for_inference(args)
    if state.config.model.num_layers == 0 and args.what != "embeddings":
        raise ConfigError("masks and sigma need at least one attention layer")
    mask_cfg = state.config.mask
    mask_over = [o for o in args.overrides if o.startswith("mask.")]
    if mask_over:
        doc = apply_overrides({"mask": state.config.mask.__dict__.copy()}, mask_over)
        mask_cfg = MaskConfig(**doc["mask"])
    rows = export_rows(state, ds, args.what, mask_cfg, args.batch_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if args.what == "embeddings":
        w.writerow(["id", "label", *(f"z{i}" for i in range(state.config.model.model_dim))])
    w.writerows(rows)
    _atomic_write(args.out, buf.getvalue())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        # overflow is reported through the divergence check, not numpy warnings
        with np.errstate(all="ignore"):
            return COMMANDS[args.command](args)
    except (ValidationError, ContractError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, StarformerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
