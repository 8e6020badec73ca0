"""Command line interface: one binary, one subcommand per pipeline stage.

Subcommands: generate, prepare, pretrain, finetune, evaluate, export, ablate.
Exit codes: 0 success, 2 user/config error, 3 state/compatibility error,
1 internal error. The environment variable FATA_SEED overrides any --seed.
Every run writes its fully resolved configuration next to its outputs, and
deterministic runs overwrite their outputs with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap(n: int | None) -> None:
    # Best effort: caps BLAS pools when set before numpy spins them up.
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _seed_of(args) -> int:
    env = os.environ.get("FATA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            from .errors import DataError

            raise DataError(f"FATA_SEED must be an integer, got {env!r}") from None
    return args.seed


def _write_resolved(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n"
    )


def _read_csv_rows(path: Path) -> list[dict]:
    from .errors import DataError

    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- generate ----------------------------------------------------------------


def cmd_generate(args) -> int:
    from .synth import GenSpec, write_dataset

    spec_doc = json.loads(Path(args.spec).read_text())
    spec_doc.setdefault("seed", 0)
    if os.environ.get("FATA_SEED") is not None:
        spec_doc["seed"] = int(os.environ["FATA_SEED"])
    spec = GenSpec.from_json_dict(spec_doc)
    out = Path(args.out_dir)
    write_dataset(spec, out)
    _write_resolved(out, {"command": "generate", "spec": spec.to_json_dict()})
    print(f"wrote {out / 'records.csv'}")
    return 0


# -- prepare -----------------------------------------------------------------


def cmd_prepare(args) -> int:
    import numpy as np

    from .errors import DataError
    from .pipeline import (
        fit_time_scale,
        group_rows,
        make_windows,
        tokenize_window,
        window_rng,
        write_shard,
        write_windows_json,
    )
    from .schema import (
        DYNAMIC,
        GAP_FIELD,
        NUMERICAL,
        FieldSchema,
        Schema,
        build_vocab,
        fit_quantizer,
        _as_number,
    )

    seed = _seed_of(args)
    rows = _read_csv_rows(Path(args.data))
    schema = Schema.from_json_dict(json.loads(Path(args.schema).read_text()))
    for f in schema:
        if rows and f.name not in rows[0]:
            raise DataError(f"schema field {f.name!r} is not a column of {args.data}")
    label_in_features = args.label_policy == "feature"

    # Split whole sequences, deterministically per seed.
    seq_ids = list(group_rows(rows).keys())
    rng = window_rng(seed, 0x5E)
    order = rng.permutation(len(seq_ids))
    n_train = int(round(args.train_frac * len(seq_ids)))
    n_val = int(round(args.val_frac * len(seq_ids)))
    if n_train == 0 or n_val == 0 or n_train + n_val >= len(seq_ids):
        raise DataError("train/val fractions leave an empty split")
    buckets = {"train": set(), "val": set(), "test": set()}
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        buckets[split].add(seq_ids[idx])
    split_rows = {s: [r for r in rows if str(r["seq_id"]) in ids] for s, ids in buckets.items()}

    # Quantizers, gap field, time scale, and vocabulary fit on train only.
    train_rows = split_rows["train"]
    quantizers = {
        f.name: fit_quantizer(
            [v for r in train_rows if (v := _as_number(r.get(f.name))) is not None],
            f.n_bins, f.name)
        for f in schema.numerical_fields
    }
    gaps: list[float] = []
    prev: dict[str, float] = {}
    gap_rows = []
    for r in train_rows:
        t = float(r["time"])
        g = t - prev.get(str(r["seq_id"]), t)
        prev[str(r["seq_id"])] = t
        gap_rows.append(dict(r, **{GAP_FIELD: g}))
        gaps.append(g)
    quantizers[GAP_FIELD] = fit_quantizer(gaps, args.bins, GAP_FIELD)
    time_scale = fit_time_scale(train_rows)

    vocab_fields = [
        f for f in schema
        if label_in_features or f.name != schema.label_field
    ] + [FieldSchema(GAP_FIELD, DYNAMIC, NUMERICAL, n_bins=args.bins)]
    vocab_schema = Schema(vocab_fields, schema.label_field if label_in_features else None)
    vocab = build_vocab(vocab_schema, quantizers, gap_rows)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    strides = {"train": args.stride, "val": args.val_stride, "test": args.test_stride}
    counts = {}
    for split, srows in split_rows.items():
        ws = make_windows(srows, schema, l=args.window_len, stride=strides[split],
                          pad=not args.no_pad, static_policy=args.static_policy)
        tws = [tokenize_window(w, vocab, quantizers, label_in_features,
                               time_scale=time_scale) for w in ws]
        if not tws:
            raise DataError(f"split {split!r} produced no windows")
        write_shard(out, split, tws, vocab_digest=vocab.digest(), time_scale=time_scale,
                    extra={"split": split, "stride": strides[split]})
        if args.debug_json:
            write_windows_json(out / f"{split}.windows.json", tws)
        counts[split] = len(tws)

    (out / "schema.json").write_text(json.dumps(schema.to_json_dict(), indent=1) + "\n")
    (out / "vocab.json").write_text(json.dumps(vocab.to_json_dict(), indent=1) + "\n")
    (out / "quantizers.json").write_text(
        json.dumps({n: q.to_json_dict() for n, q in quantizers.items()}, indent=1) + "\n"
    )
    _write_resolved(out, {
        "command": "prepare",
        "data": str(args.data),
        "window_len": args.window_len,
        "strides": strides,
        "bins": args.bins,
        "label_policy": args.label_policy,
        "static_policy": args.static_policy,
        "pad": not args.no_pad,
        "train_frac": args.train_frac,
        "val_frac": args.val_frac,
        "seed": seed,
        "time_scale": time_scale,
        "vocab_digest": vocab.digest(),
        "window_counts": counts,
    })
    print(f"prepared {counts} windows under {out}")
    return 0


# -- model construction helpers ------------------------------------------------


def _load_prepared(data_dir: Path, split: str):
    from .pipeline import read_shard

    return read_shard(data_dir, split)


def _vocab_from_dir(data_dir: Path):
    from .schema import Vocabulary

    return Vocabulary.from_json_dict(json.loads((data_dir / "vocab.json").read_text()))


def _model_config_from_args(args, manifest, vocab):
    from .model import ModelConfig

    return ModelConfig(
        window_len=manifest["window_len"],
        static_fields=tuple(manifest["static_fields"]),
        dynamic_fields=tuple(manifest["dynamic_fields"]),
        mode=args.mode,
        use_time_field=None if args.time_field == "auto" else (args.time_field == "on"),
        dim=args.dim,
        field_layers=args.field_layers,
        field_heads=args.field_heads,
        bert_layers=args.layers,
        bert_heads=args.heads,
        ff_dim=args.ff_dim,
        dropout=args.dropout,
        time_scale=manifest["time_scale"],
        vocab_digest=vocab.digest(),
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    from .model import MODES

    p.add_argument("--mode", choices=MODES, default="fata")
    p.add_argument("--time-field", choices=("auto", "on", "off"), default="auto",
                   help="quantized time gap as an extra dynamic field (auto: only no_time_pos)")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--field-layers", type=int, default=1)
    p.add_argument("--field-heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ff-dim", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)


def _train_config(args, seed: int):
    from .train import TrainConfig

    return TrainConfig(
        epochs=getattr(args, "epochs", 3),
        finetune_epochs=getattr(args, "epochs", 20),
        batch_size=args.batch_size,
        lr_pretrain=getattr(args, "lr", 1e-4),
        lr_finetune=getattr(args, "lr", 5e-5),
        mask_rate=getattr(args, "mask_rate", 0.15),
        patience=getattr(args, "patience", 3),
        downsample_ratio=getattr(args, "downsample_ratio", 20.0),
        grad_clip=getattr(args, "grad_clip", 1.0),
        seed=seed,
    )


# -- pretrain ------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .model import Model
    from .train import pretrain, save_checkpoint

    seed = _seed_of(args)
    data_dir = Path(args.data_dir)
    windows, manifest = _load_prepared(data_dir, "train")
    vocab = _vocab_from_dir(data_dir)
    config = _model_config_from_args(args, manifest, vocab)
    model = Model(config, vocab, seed=seed)
    cfg = _train_config(args, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = pretrain(windows, model, cfg, metrics_path=out / "metrics.jsonl")
    save_checkpoint(model, out / "checkpoint", extra={"phase": "pretrain", "steps": result.steps})
    _write_resolved(out, {
        "command": "pretrain", "data_dir": str(data_dir), "seed": seed,
        "model": config.to_json_dict(), "train": cfg.to_json_dict(),
    })
    print(f"pretrained {result.steps} steps; "
          f"loss {result.first_loss:.4f} -> {result.final_loss:.4f}; "
          f"checkpoint at {out / 'checkpoint'}")
    return 0


# -- finetune --------------------------------------------------------------------


def cmd_finetune(args) -> int:
    from .errors import DataError
    from .model import Model
    from .pipeline import apply_label_mask
    from .train import downsample, finetune, load_checkpoint, save_checkpoint

    seed = _seed_of(args)
    data_dir = Path(args.data_dir)
    train_windows, manifest = _load_prepared(data_dir, "train")
    val_windows, _ = _load_prepared(data_dir, "val")
    vocab = _vocab_from_dir(data_dir)

    if args.checkpoint and args.no_pretrain:
        raise DataError("--checkpoint and --no-pretrain are mutually exclusive")
    if args.checkpoint:
        model, _extras = load_checkpoint(Path(args.checkpoint),
                                         expected_vocab_digest=vocab.digest())
        if model.config.mode != args.mode:
            raise DataError(
                f"checkpoint mode {model.config.mode!r} does not match --mode {args.mode!r}")
    else:
        config = _model_config_from_args(args, manifest, vocab)
        model = Model(config, vocab, seed=seed)

    if args.mask_label_token:
        if vocab.schema.label_field is None:
            raise DataError("--mask-label-token needs a label field in the features")
        train_windows = [apply_label_mask(w, vocab) for w in train_windows]
        val_windows = [apply_label_mask(w, vocab) for w in val_windows]

    cfg = _train_config(args, seed)
    if args.downsample_ratio > 0:
        train_windows = downsample(train_windows, cfg.downsample_ratio, seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = finetune(model, train_windows, val_windows, cfg,
                      freeze_encoder=args.freeze_encoder,
                      metrics_path=out / "metrics.jsonl")
    save_checkpoint(model, out / "checkpoint",
                    extra={"phase": "finetune", "best_epoch": result.best_epoch,
                           "best_val_auc": result.best_auc})
    _write_resolved(out, {
        "command": "finetune", "data_dir": str(data_dir), "seed": seed,
        "checkpoint": args.checkpoint, "no_pretrain": args.no_pretrain,
        "freeze_encoder": args.freeze_encoder, "mask_label_token": args.mask_label_token,
        "model": model.config.to_json_dict(), "train": cfg.to_json_dict(),
    })
    print(f"fine-tuned: best val AUC {result.best_auc:.4f} at epoch {result.best_epoch}; "
          f"checkpoint at {out / 'checkpoint'}")
    return 0


# -- evaluate ---------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    import numpy as np

    from .evalviz import roc_auc
    from .train import load_checkpoint

    data_dir = Path(args.data_dir)
    windows, _manifest = _load_prepared(data_dir, args.split)
    vocab = _vocab_from_dir(data_dir)
    model, _ = load_checkpoint(Path(args.checkpoint), expected_vocab_digest=vocab.digest())
    layout = model.config.layout()
    data = [layout.transform(w) for w in windows]
    scores = model.scores(data)
    labels = np.asarray([w.label for w in windows])
    result = roc_auc(scores, labels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "split": args.split,
        "auc": result.auc,
        "n_pos": result.n_pos,
        "n_neg": result.n_neg,
        "tie_pairs": result.tie_pairs,
        "n_windows": len(windows),
    }
    (out / f"metrics.{args.split}.json").write_text(json.dumps(payload, indent=1) + "\n")
    _write_resolved(out, {"command": "evaluate", "data_dir": str(data_dir),
                          "checkpoint": str(args.checkpoint), "split": args.split})
    print(json.dumps(payload))
    return 0


# -- export -----------------------------------------------------------------------


def cmd_export(args) -> int:
    from .evalviz import export_embeddings, pca_fit_project, write_embedding_csv, write_scatter_svg
    from .train import load_checkpoint

    data_dir = Path(args.data_dir)
    windows, _ = _load_prepared(data_dir, args.split)
    vocab = _vocab_from_dir(data_dir)
    model, _ = load_checkpoint(Path(args.checkpoint), expected_vocab_digest=vocab.digest())
    layout = model.config.layout()
    data = [layout.transform(w) for w in windows]
    exp = export_embeddings(model, data, args.which, tag_field=args.tag_field)
    res = pca_fit_project(exp.rows, args.components)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embedding_csv(out / f"embeddings.{args.which}.csv", exp.ids, exp.tags, res.coords)
    write_scatter_svg(out / f"embeddings.{args.which}.svg", res.coords, exp.tags)
    _write_resolved(out, {
        "command": "export", "data_dir": str(data_dir), "checkpoint": str(args.checkpoint),
        "which": args.which, "tag_field": args.tag_field, "components": args.components,
        "split": args.split,
        "explained_variance": [float(v) for v in res.explained_variance],
    })
    print(f"exported {exp.rows.shape[0]} rows to {out}")
    return 0


# -- ablate -----------------------------------------------------------------------


def cmd_ablate(args) -> int:
    import numpy as np

    from .evalviz import roc_auc
    from .model import Model
    from .train import downsample, finetune, pretrain

    seed = _seed_of(args)
    data_dir = Path(args.data_dir)
    train_windows, manifest = _load_prepared(data_dir, "train")
    val_windows, _ = _load_prepared(data_dir, "val")
    test_windows, _ = _load_prepared(data_dir, "test")
    vocab = _vocab_from_dir(data_dir)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    variants = [
        ("fata", "fata", True),
        ("no_time_pos", "no_time_pos", True),
        ("replicated_static", "replicated_static", True),
        ("fata_no_pretrain", "fata", False),
    ]
    results = {}
    for name, mode, with_pretrain in variants:
        ns = argparse.Namespace(**vars(args), mode=mode)
        config = _model_config_from_args(ns, manifest, vocab)
        model = Model(config, vocab, seed=seed)
        cfg = _train_config(args, seed)
        if with_pretrain:
            pretrain(train_windows, model, cfg)
        ft_train = downsample(train_windows, cfg.downsample_ratio, seed)
        finetune(model, ft_train, val_windows, cfg)
        layout = model.config.layout()
        data = [layout.transform(w) for w in test_windows]
        auc = roc_auc(model.scores(data), np.asarray([w.label for w in test_windows])).auc
        results[name] = auc
        print(f"{name:24s} test AUC {auc:.4f}")
    (out / "ablate.json").write_text(json.dumps(results, indent=1) + "\n")
    _write_resolved(out, {"command": "ablate", "data_dir": str(data_dir), "seed": seed,
                          "results": results})
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqtab",
        description="Field- and time-aware sequence encoder for tabular records",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (best effort)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset from a spec JSON")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("prepare", help="fit tokenizers and cut windows into shards")
    p.add_argument("data")
    p.add_argument("schema")
    p.add_argument("out_dir")
    p.add_argument("--window-len", "--l", dest="window_len", type=int, default=10)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--val-stride", type=int, default=5)
    p.add_argument("--test-stride", type=int, default=1)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--label-policy", choices=("exclude", "feature"), default="exclude")
    p.add_argument("--static-policy", choices=("error", "first"), default="error")
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--no-pad", action="store_true")
    p.add_argument("--debug-json", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("pretrain", help="masked-token pretraining on prepared shards")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="train the classification head (and encoder)")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--no-pretrain", action="store_true",
                   help="start from a fresh initialization")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--downsample-ratio", type=float, default=20.0)
    p.add_argument("--freeze-encoder", action="store_true")
    p.add_argument("--mask-label-token", action="store_true",
                   help="replace the last record's label token with [MASK]")
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="AUC of a checkpoint on one split")
    p.add_argument("data_dir")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("export", help="sequence embeddings, PCA coordinates, scatter")
    p.add_argument("data_dir")
    p.add_argument("checkpoint")
    p.add_argument("out_dir")
    p.add_argument("--which", choices=("concat_window", "per_record", "static_row"),
                   default="concat_window")
    p.add_argument("--tag-field", default=None)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("ablate", help="run the four variants and compare test AUC")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    _add_model_flags(p)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--downsample-ratio", type=float, default=20.0)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_thread_cap(args.threads)
    from .errors import CheckpointError, DataError

    try:
        return args.fn(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"state error: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
