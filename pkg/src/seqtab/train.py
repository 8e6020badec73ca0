"""Pretraining, downstream fine-tuning, and checkpoint persistence.

Both loops are pure functions of (data order, config, seed): masking draws
come from per-(step, window) derived generators, batch order from a seeded
shuffle, and dropout from a per-step stream, so two runs with the same
inputs produce bit-identical parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, TrainingDiverged
from .evalviz import roc_auc
from .model import Model, ModelConfig
from .nn import Adam, Tape, clip_global_norm, zero_grads
from .pipeline import TokenizedWindow, collate, random_mask, window_rng
from .schema import Vocabulary


@dataclass
class TrainConfig:
    epochs: int = 3  # pretraining passes over the data
    finetune_epochs: int = 20
    batch_size: int = 32
    lr_pretrain: float = 1e-4
    lr_finetune: float = 5e-5
    mask_rate: float = 0.15
    mask_probs: tuple[float, float, float] = (0.8, 0.1, 0.1)
    patience: int = 3  # non-improving validation evaluations before stopping
    downsample_ratio: float = 20.0  # normal : anomalous windows
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        self.mask_probs = tuple(self.mask_probs)
        if self.patience < 1:
            raise DataError("patience must be >= 1")
        if self.downsample_ratio < 1:
            raise DataError("downsample ratio must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch_size < 1:
            raise DataError("bad epoch or batch settings")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise DataError("mask rate must be in [0, 1]")

    def to_json_dict(self) -> dict:
        d = self.__dict__.copy()
        d["mask_probs"] = list(self.mask_probs)
        return d


def _write_jsonl(path, rows: list[dict]) -> None:
    if path is None:
        return
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))


@dataclass
class PretrainResult:
    losses: list[tuple[int, float]]  # (step, loss) samples
    steps: int

    @property
    def first_loss(self) -> float:
        return self.losses[0][1]

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1]


def pretrain(
    windows: list[TokenizedWindow],
    model: Model,
    cfg: TrainConfig,
    *,
    metrics_path=None,
) -> PretrainResult:
    """Masked-token pretraining: mask, forward, backward, clip, Adam.

    Each step re-masks its batch with a (seed, step, window-index) derived
    generator, so masking is independent of batch composition and epoch
    boundaries while staying fully reproducible.
    """
    layout = model.config.layout()
    data = [layout.transform(w) for w in windows]
    n = len(data)
    if n == 0:
        raise DataError("no training windows")
    opt = Adam(model.params, lr=cfg.lr_pretrain)
    order_rng = window_rng(cfg.seed, 0xD5)
    losses: list[tuple[int, float]] = []
    metrics: list[dict] = []
    step = 0
    for _epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idxs = perm[lo : lo + cfg.batch_size]
            masked = [
                random_mask(data[i], cfg.mask_rate, window_rng(cfg.seed, 1, step, int(i)),
                            model.vocab, cfg.mask_probs)[0]
                for i in idxs
            ]
            batch = collate(masked)
            drop_rng = window_rng(cfg.seed, 2, step)
            with Tape() as tape:
                zero_grads(model.params)
                loss, count = model.pretrain_loss(batch, train=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite pretraining loss {value} at step {step}")
            if count > 0:
                tape.backward(loss)
                clip_global_norm(model.params, cfg.grad_clip)
                opt.step()
            if step % cfg.log_every == 0 or (lo + cfg.batch_size >= n and _epoch == cfg.epochs - 1):
                losses.append((step, value))
                metrics.append({"step": step, "loss": value})
            step += 1
    _write_jsonl(metrics_path, metrics)
    return PretrainResult(losses, step)


def downsample(
    windows: list[TokenizedWindow], ratio: float, seed: int
) -> list[TokenizedWindow]:
    """Keep every positive window; subsample negatives to ratio x positives."""
    pos = [i for i, w in enumerate(windows) if w.label == 1]
    neg = [i for i, w in enumerate(windows) if w.label == 0]
    if len(pos) + len(neg) != len(windows):
        raise DataError("downsampling needs binary labels on every window")
    if not pos:
        raise DataError("no positive windows to balance against")
    keep_n = min(len(neg), int(ratio * len(pos)))
    rng = window_rng(seed, 0xDA)
    chosen = set(rng.choice(len(neg), size=keep_n, replace=False).tolist()) if neg else set()
    keep = set(pos) | {neg[i] for i in chosen}
    return [w for i, w in enumerate(windows) if i in keep]


@dataclass
class FinetuneResult:
    best_auc: float
    best_epoch: int
    history: list[tuple[int, float]]  # (epoch, validation auc)
    train_losses: list[float] = field(default_factory=list)


def finetune(
    model: Model,
    train_windows: list[TokenizedWindow],
    val_windows: list[TokenizedWindow],
    cfg: TrainConfig,
    *,
    freeze_encoder: bool = False,
    metrics_path=None,
) -> FinetuneResult:
    """Binary cross-entropy training of the classification head.

    Evaluates validation AUC once per epoch and stops after `patience`
    consecutive evaluations without improvement; the model is left holding
    the best-AUC parameters. `freeze_encoder` restricts updates to the head
    (a linear probe), leaving every other tensor bit-identical.
    """
    layout = model.config.layout()
    data = [layout.transform(w) for w in train_windows]
    val = [layout.transform(w) for w in val_windows]
    if any(w.label not in (0, 1) for w in data + val):
        raise DataError("fine-tuning needs binary labels on every window")
    if len({w.label for w in val}) < 2:
        raise DataError("validation set must contain both classes")

    trainable = (
        {k: model.params[k] for k in model.head_param_names()} if freeze_encoder else model.params
    )
    opt = Adam(trainable, lr=cfg.lr_finetune)
    order_rng = window_rng(cfg.seed, 0xF7)
    n = len(data)
    best_auc = -1.0
    best_epoch = -1
    best_state = model.state_dict()
    bad_evals = 0
    history: list[tuple[int, float]] = []
    train_losses: list[float] = []
    metrics: list[dict] = []
    step = 0
    for epoch in range(cfg.finetune_epochs):
        perm = order_rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idxs = perm[lo : lo + cfg.batch_size]
            batch = collate([data[i] for i in idxs])
            labels = batch.labels.astype(np.float64)
            drop_rng = window_rng(cfg.seed, 3, step)
            with Tape() as tape:
                zero_grads(model.params)
                loss = model.classification_loss(batch, labels, train=True, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite fine-tuning loss at step {step}")
            tape.backward(loss)
            clip_global_norm(trainable, cfg.grad_clip)
            opt.step()
            epoch_losses.append(value)
            step += 1
        train_losses.append(float(np.mean(epoch_losses)))
        auc = roc_auc(model.scores(val), np.asarray([w.label for w in val])).auc
        history.append((epoch, auc))
        metrics.append({"epoch": epoch, "val_auc": auc, "train_loss": train_losses[-1]})
        if auc > best_auc:
            best_auc = auc
            best_epoch = epoch
            best_state = model.state_dict()
            bad_evals = 0
        else:
            bad_evals += 1
            if bad_evals >= cfg.patience:
                break
    model.load_state_dict(best_state)
    _write_jsonl(metrics_path, metrics)
    return FinetuneResult(best_auc, best_epoch, history, train_losses)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path, *, optimizer: Adam | None = None,
                    extra: dict | None = None) -> Path:
    """Write config.json, vocab.json, manifest.json, weights.bin (+ optimizer.bin).

    The weight blob holds little-endian reals in manifest order (sorted
    parameter names); 32-bit for float32 models, 64-bit for float64
    verification models, recorded per tensor in the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    wire = "<f8" if model.config.dtype == "float64" else "<f4"
    names = sorted(model.params)
    tensors = []
    blob = bytearray()
    offset = 0
    for name in names:
        arr = model.params[name].data.astype(wire)
        raw = arr.tobytes(order="C")
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": wire,
             "offset": offset, "nbytes": len(raw)}
        )
        blob.extend(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_VERSION,
        "vocab_digest": model.vocab.digest(),
        "dtype": model.config.dtype,
        "tensors": tensors,
        "optimizer": {"present": optimizer is not None,
                      "t": optimizer.t if optimizer else 0},
        "extra": extra or {},
    }
    (path / "weights.bin").write_bytes(bytes(blob))
    if optimizer is not None:
        opt_blob = bytearray()
        for prefix in ("m", "v"):
            source = optimizer.m if prefix == "m" else optimizer.v
            for name in names:
                opt_blob.extend(source[name].astype(wire).tobytes(order="C"))
        (path / "optimizer.bin").write_bytes(bytes(opt_blob))
    (path / "config.json").write_text(json.dumps(model.config.to_json_dict(), indent=1) + "\n")
    (path / "vocab.json").write_text(json.dumps(model.vocab.to_json_dict(), indent=1) + "\n")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_checkpoint(path, *, expected_vocab_digest: str | None = None) -> tuple[Model, dict]:
    """Rebuild a model; the round trip is bit-exact and digest-verified."""
    path = Path(path)
    for name in ("config.json", "vocab.json", "manifest.json", "weights.bin"):
        if not (path / name).exists():
            raise CheckpointError(f"checkpoint is missing {name}")
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_VERSION:
        raise CheckpointError("unknown checkpoint manifest version")
    try:
        vocab = Vocabulary.from_json_dict(json.loads((path / "vocab.json").read_text()))
    except DataError as e:
        raise CheckpointError(f"bad vocabulary in checkpoint: {e}") from e
    digest = vocab.digest()
    if digest != manifest["vocab_digest"]:
        raise CheckpointError("checkpoint vocabulary digest mismatch")
    if expected_vocab_digest is not None and expected_vocab_digest != digest:
        raise CheckpointError("checkpoint was built against a different vocabulary")
    config = ModelConfig.from_json_dict(json.loads((path / "config.json").read_text()))

    blob = (path / "weights.bin").read_bytes()
    expected = sum(t["nbytes"] for t in manifest["tensors"])
    if len(blob) != expected:
        raise CheckpointError(f"weight blob is {len(blob)} bytes, manifest says {expected}")
    from .nn import autodiff as ad

    params = {}
    dtype = config.np_dtype()
    for t in manifest["tensors"]:
        raw = blob[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"]).astype(dtype)
        params[t["name"]] = ad.parameter(arr)
    model = Model(config, vocab, params=params)
    extras = dict(manifest.get("extra", {}))
    opt_meta = manifest.get("optimizer", {})
    if opt_meta.get("present") and (path / "optimizer.bin").exists():
        opt_blob = (path / "optimizer.bin").read_bytes()
        names = sorted(params)
        state = {"t": opt_meta.get("t", 0), "m": {}, "v": {}}
        pos = 0
        for prefix in ("m", "v"):
            for name in names:
                nbytes = params[name].data.astype(
                    "<f8" if config.dtype == "float64" else "<f4").nbytes
                raw = opt_blob[pos : pos + nbytes]
                if len(raw) != nbytes:
                    raise CheckpointError("optimizer blob truncated")
                state[prefix][name] = np.frombuffer(
                    raw, dtype="<f8" if config.dtype == "float64" else "<f4"
                ).reshape(params[name].data.shape).astype(dtype)
                pos += nbytes
        extras["optimizer"] = state
    return model, extras
