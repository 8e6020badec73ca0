"""Windowing, tokenization, and random masking of record sequences.

A window is `l` consecutive records of one sequence, with per-window times
rebased so the first slot sits at 0. Short sequences are padded on the left;
padded slots carry [PAD] tokens, time 0, and are excluded from attention,
masking, and loss. Tokenization maps every raw value to its field-local id,
and `random_mask` implements the masked-token pretraining corruption.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .schema import (
    GAP_FIELD,
    MASK_ID,
    NUMERICAL,
    PAD_ID,
    UNK_ID,
    Quantizer,
    Schema,
    Vocabulary,
    _as_number,
    _is_missing,
)


@dataclass
class RecordWindow:
    """Raw values of one window, before tokenization."""

    seq_id: str
    static_names: tuple[str, ...]
    dynamic_names: tuple[str, ...]
    static_values: tuple
    dynamic_values: list[list]  # l rows, padded rows hold None values
    times: np.ndarray  # (l,) rebased so the first slot is 0
    label: int | None
    pad_count: int

    @property
    def length(self) -> int:
        return len(self.dynamic_values)


def group_rows(rows: list[dict]) -> dict[str, list[dict]]:
    """Group records by sequence id, keeping first-appearance order."""
    out: dict[str, list[dict]] = {}
    for r in rows:
        if "seq_id" not in r or "time" not in r:
            raise DataError("records need 'seq_id' and 'time' columns")
        out.setdefault(str(r["seq_id"]), []).append(r)
    return out


def _row_time(r: dict) -> float:
    t = _as_number(r["time"])
    if t is None or t < 0:
        raise DataError(f"bad timestamp {r['time']!r} in sequence {r.get('seq_id')!r}")
    return t


def _window_offsets(n: int, l: int, stride: int) -> list[int]:
    # Regular strided offsets, then one clamped window so the final record of
    # the sequence is always covered.
    offsets = list(range(0, n - l + 1, stride))
    if offsets[-1] != n - l:
        offsets.append(n - l)
    return offsets


def make_windows(
    rows: list[dict],
    schema: Schema,
    l: int,
    stride: int,
    *,
    pad: bool = True,
    static_policy: str = "error",
) -> list[RecordWindow]:
    """Cut per-sequence, time-sorted records into length-`l` windows.

    Static fields must be constant across the records of a window; with
    `static_policy="first"` a varying field is tolerated and the first
    record's value wins. A window's label is the label of its last record.
    Sequences shorter than `l` yield one left-padded window when `pad` is
    set, otherwise none.
    """
    if l < 1 or stride < 1:
        raise DataError("window length and stride must be >= 1")
    if static_policy not in ("error", "first"):
        raise DataError(f"unknown static_policy {static_policy!r}")
    static_names = tuple(f.name for f in schema.static_fields)
    dynamic_names = tuple(f.name for f in schema.dynamic_fields)
    label_field = schema.label_field

    windows: list[RecordWindow] = []
    for seq_id, recs in group_rows(rows).items():
        times = [_row_time(r) for r in recs]
        if any(times[i] > times[i + 1] for i in range(len(times) - 1)):
            raise DataError(f"sequence {seq_id!r}: timestamps are not sorted")
        n = len(recs)
        if n >= l:
            spans = [(k, recs[k : k + l], times[k : k + l]) for k in _window_offsets(n, l, stride)]
        elif pad:
            spans = [(0, recs, times)]
        else:
            continue

        for offset, wrecs, wtimes in spans:
            pad_count = l - len(wrecs)
            statics = []
            for name in static_names:
                vals = [r.get(name) for r in wrecs]
                if any(v != vals[0] for v in vals[1:]):
                    if static_policy == "error":
                        raise DataError(
                            f"sequence {seq_id!r}: static field {name!r} varies inside a window"
                        )
                statics.append(vals[0])
            dyn: list[list] = [[None] * len(dynamic_names) for _ in range(pad_count)]
            for r in wrecs:
                dyn.append([r.get(name) for name in dynamic_names])
            t0 = wtimes[0]
            t = np.zeros(l, dtype=np.float64)
            t[pad_count:] = np.asarray(wtimes) - t0

            label = None
            if label_field is not None:
                raw = wrecs[-1].get(label_field)
                num = _as_number(raw)
                if num is None:
                    raise DataError(f"sequence {seq_id!r}: label {raw!r} is not numeric")
                label = int(num)
            windows.append(
                RecordWindow(
                    seq_id=seq_id,
                    static_names=static_names,
                    dynamic_names=dynamic_names,
                    static_values=tuple(statics),
                    dynamic_values=dyn,
                    times=t,
                    label=label,
                    pad_count=pad_count,
                )
            )
    return windows


def fit_time_scale(rows: list[dict]) -> float:
    """Median positive inter-record gap over all sequences; 1.0 when none."""
    gaps: list[float] = []
    for recs in group_rows(rows).values():
        ts = [_row_time(r) for r in recs]
        gaps.extend(b - a for a, b in zip(ts, ts[1:]) if b - a > 0)
    if not gaps:
        return 1.0
    return float(np.median(gaps))


def rebase_and_scale_times(window: RecordWindow, time_scale: float) -> np.ndarray:
    """Window times divided by the fitted scale."""
    if not time_scale > 0:
        raise DataError("time_scale must be positive")
    t = window.times
    if any(t[i] > t[i + 1] for i in range(len(t) - 1) if i >= window.pad_count):
        raise DataError("window times are not non-decreasing")
    return t / time_scale


@dataclass
class TokenizedWindow:
    """Token ids, mask indicators, and validity for one window.

    `*_ind` is 1 where the token was left untouched and 0 where the masking
    step selected it; `*_cand` marks positions eligible for masking (padding
    and input-side label masking are never candidates). `*_orig` keeps the
    pre-corruption ids the pretraining loss predicts.
    """

    seq_id: str
    pad_count: int
    label: int
    static_fields: tuple[str, ...]
    dynamic_fields: tuple[str, ...]
    sid: np.ndarray  # (n_s,) int32, current (possibly corrupted) ids
    sorig: np.ndarray
    sind: np.ndarray  # (n_s,) int8
    scand: np.ndarray  # (n_s,) bool
    did: np.ndarray  # (l, n_f) int32
    dorig: np.ndarray
    dind: np.ndarray
    dcand: np.ndarray
    times: np.ndarray  # (l,) float32, scaled
    row_valid: np.ndarray  # (l,) bool
    gap_ids: np.ndarray | None = None  # (l,) int32 quantized inter-record gaps

    @property
    def length(self) -> int:
        return self.did.shape[0]

    @property
    def level_one_token_count(self) -> int:
        return int(self.sid.size + self.did.size)

    def copy(self) -> "TokenizedWindow":
        return replace(
            self,
            sid=self.sid.copy(),
            sorig=self.sorig.copy(),
            sind=self.sind.copy(),
            scand=self.scand.copy(),
            did=self.did.copy(),
            dorig=self.dorig.copy(),
            dind=self.dind.copy(),
            dcand=self.dcand.copy(),
            times=self.times.copy(),
            row_valid=self.row_valid.copy(),
            gap_ids=None if self.gap_ids is None else self.gap_ids.copy(),
        )


def _encode_value(vocab: Vocabulary, quantizers: dict[str, Quantizer], fs, raw) -> int:
    if _is_missing(raw):
        return UNK_ID
    if fs.dtype == NUMERICAL:
        return vocab.lookup(fs.name, quantizers[fs.name].bin_of(raw))
    return vocab.lookup(fs.name, str(raw))


def tokenize_window(
    w: RecordWindow,
    vocab: Vocabulary,
    quantizers: dict[str, Quantizer],
    label_in_features: bool,
    *,
    time_scale: float = 1.0,
) -> TokenizedWindow:
    """Map a window's raw values onto token ids.

    Numerical values are quantized first; values unseen at fit time map to
    [UNK]; padded rows map every dynamic field to [PAD]. The label column is
    dropped entirely when `label_in_features` is false. When the vocabulary
    carries the synthetic gap field, per-record time gaps are quantized into
    a separate id array so model variants can opt into time as a feature.
    """
    schema = vocab.schema
    label_field = schema.label_field
    keep = lambda name: label_in_features or name != label_field

    s_fields = [schema.field(n) for n in w.static_names if keep(n) and n in schema]
    d_fields = [
        schema.field(n)
        for n in w.dynamic_names
        if keep(n) and n in schema and n != GAP_FIELD
    ]
    for fs in s_fields + d_fields:
        if fs.name not in vocab.tables:
            raise DataError(f"field {fs.name!r} missing from vocabulary")

    l = w.length
    n_s, n_f = len(s_fields), len(d_fields)
    sid = np.zeros(n_s, dtype=np.int32)
    for j, fs in enumerate(s_fields):
        idx = w.static_names.index(fs.name)
        sid[j] = _encode_value(vocab, quantizers, fs, w.static_values[idx])

    did = np.full((l, n_f), PAD_ID, dtype=np.int32)
    for i in range(w.pad_count, l):
        row = w.dynamic_values[i]
        for j, fs in enumerate(d_fields):
            idx = w.dynamic_names.index(fs.name)
            did[i, j] = _encode_value(vocab, quantizers, fs, row[idx])

    row_valid = np.ones(l, dtype=bool)
    row_valid[: w.pad_count] = False

    gap_ids = None
    if GAP_FIELD in vocab.tables:
        gaps = np.zeros(l, dtype=np.float64)
        real = w.times[w.pad_count :]
        gaps[w.pad_count + 1 :] = np.diff(real)
        q = quantizers[GAP_FIELD]
        gap_ids = np.full(l, PAD_ID, dtype=np.int32)
        for i in range(w.pad_count, l):
            gap_ids[i] = vocab.lookup(GAP_FIELD, q.bin_of(gaps[i]))

    times = rebase_and_scale_times(w, time_scale).astype(np.float32)
    return TokenizedWindow(
        seq_id=w.seq_id,
        pad_count=w.pad_count,
        label=-1 if w.label is None else int(w.label),
        static_fields=tuple(f.name for f in s_fields),
        dynamic_fields=tuple(f.name for f in d_fields),
        sid=sid,
        sorig=sid.copy(),
        sind=np.ones(n_s, dtype=np.int8),
        scand=np.ones(n_s, dtype=bool),
        did=did,
        dorig=did.copy(),
        dind=np.ones((l, n_f), dtype=np.int8),
        dcand=np.repeat(row_valid[:, None], n_f, axis=1) if n_f else np.zeros((l, 0), bool),
        times=times,
        row_valid=row_valid,
        gap_ids=gap_ids,
    )


@dataclass
class MaskStats:
    candidates_static: int = 0
    candidates_dynamic: int = 0
    selected_static: int = 0
    selected_dynamic: int = 0
    masked: int = 0
    randomized: int = 0
    kept: int = 0

    @property
    def candidates(self) -> int:
        return self.candidates_static + self.candidates_dynamic

    @property
    def selected(self) -> int:
        return self.selected_static + self.selected_dynamic

    def __add__(self, other: "MaskStats") -> "MaskStats":
        return MaskStats(
            self.candidates_static + other.candidates_static,
            self.candidates_dynamic + other.candidates_dynamic,
            self.selected_static + other.selected_static,
            self.selected_dynamic + other.selected_dynamic,
            self.masked + other.masked,
            self.randomized + other.randomized,
            self.kept + other.kept,
        )


def random_mask(
    tw: TokenizedWindow,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocabulary,
    probs: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[TokenizedWindow, MaskStats]:
    """Corrupt a window for masked-token pretraining.

    Every candidate position is independently selected with probability
    `rate`, static and dynamic pools drawn separately. A selected token gets
    indicator 0 and becomes [MASK] / a uniform id from the same field's local
    vocabulary / its original value with the given probabilities. Kept and
    randomized selections still count as masked for the loss. Padding and
    non-candidate positions are never altered.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError("mask rate must be in [0, 1]")
    if abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
        raise DataError("replacement probabilities must be non-negative and sum to 1")
    out = tw.copy()
    stats = MaskStats(
        candidates_static=int(tw.scand.sum()),
        candidates_dynamic=int(tw.dcand.sum()),
    )

    def corrupt(ids: np.ndarray, ind: np.ndarray, sel_flat: np.ndarray, field_of):
        # sel_flat indexes the flattened (row-major) view of ids.
        n_sel = sel_flat.size
        if n_sel == 0:
            return
        flat = ids.reshape(-1)
        ind.reshape(-1)[sel_flat] = 0
        u = rng.random(n_sel)
        to_mask = u < probs[0]
        to_rand = (~to_mask) & (u < probs[0] + probs[1])
        flat[sel_flat[to_mask]] = MASK_ID
        for pos, fname in zip(sel_flat[to_rand], field_of(sel_flat[to_rand])):
            base = vocab.field_base(fname)
            flat[pos] = base + int(rng.integers(vocab.field_size(fname)))
        stats.masked += int(to_mask.sum())
        stats.randomized += int(to_rand.sum())
        stats.kept += int(n_sel - to_mask.sum() - to_rand.sum())

    if out.sid.size:
        sel = np.flatnonzero(out.scand & (rng.random(out.sid.shape) < rate))
        stats.selected_static = sel.size
        corrupt(out.sid, out.sind, sel,
                lambda ix: [out.static_fields[i] for i in ix])
    if out.did.size:
        sel = np.flatnonzero(out.dcand.reshape(-1) & (rng.random(out.did.size) < rate))
        stats.selected_dynamic = sel.size
        n_f = len(out.dynamic_fields)
        corrupt(out.did, out.dind, sel,
                lambda ix: [out.dynamic_fields[i % n_f] for i in ix])
    return out, stats


def window_rng(seed: int, *stream: int) -> np.random.Generator:
    """Derived generator for one window/step; independent of worker order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *stream))))


def apply_label_mask(tw: TokenizedWindow, vocab: Vocabulary) -> TokenizedWindow:
    """Replace the last record's label token with [MASK] on the input side.

    Used when the label rides along as a feature: the indicator stays 1 (the
    position is not a pretraining target) and the slot stops being a masking
    candidate.
    """
    label_field = vocab.schema.label_field
    if label_field is None or label_field not in tw.dynamic_fields:
        raise DataError("window has no label field to mask")
    j = tw.dynamic_fields.index(label_field)
    out = tw.copy()
    out.did[-1, j] = MASK_ID
    out.dcand[-1, j] = False
    return out


@dataclass(frozen=True)
class ModeLayout:
    """Rearranges canonical windows into the layout a model variant consumes.

    `use_time_field` appends the quantized gap column as an extra dynamic
    field. `fold_static` replicates the window's static tokens into every
    record (the single-field-transformer layout); padded rows get [PAD]
    instead of the replicated values.
    """

    use_time_field: bool = False
    fold_static: bool = False

    def transform(self, tw: TokenizedWindow) -> TokenizedWindow:
        out = tw
        if self.use_time_field:
            if tw.gap_ids is None:
                raise DataError("windows carry no gap ids; re-prepare with a gap field")
            out = out.copy()
            col = out.gap_ids.astype(np.int32)[:, None]
            out.did = np.hstack([out.did, col])
            out.dorig = np.hstack([out.dorig, col])
            out.dind = np.hstack([out.dind, np.ones_like(col, dtype=np.int8)])
            out.dcand = np.hstack([out.dcand, out.row_valid[:, None]])
            out.dynamic_fields = out.dynamic_fields + (GAP_FIELD,)
        if self.fold_static and out.sid.size:
            out = out.copy() if out is tw else out
            l = out.length
            rep = np.repeat(out.sid[None, :], l, axis=0).astype(np.int32)
            rep_orig = np.repeat(out.sorig[None, :], l, axis=0).astype(np.int32)
            rep[~out.row_valid] = PAD_ID
            rep_orig[~out.row_valid] = PAD_ID
            rep_cand = out.scand[None, :] & out.row_valid[:, None]
            out.did = np.hstack([rep, out.did])
            out.dorig = np.hstack([rep_orig, out.dorig])
            out.dind = np.hstack([np.ones_like(rep, dtype=np.int8), out.dind])
            out.dcand = np.hstack([rep_cand, out.dcand])
            out.dynamic_fields = out.static_fields + out.dynamic_fields
            out.static_fields = ()
            out.sid = np.zeros(0, dtype=np.int32)
            out.sorig = np.zeros(0, dtype=np.int32)
            out.sind = np.ones(0, dtype=np.int8)
            out.scand = np.zeros(0, dtype=bool)
        return out


@dataclass
class Batch:
    """Stacked window arrays ready for a model forward pass."""

    sid: np.ndarray  # (B, n_s)
    sorig: np.ndarray
    sind: np.ndarray
    did: np.ndarray  # (B, l, n_f)
    dorig: np.ndarray
    dind: np.ndarray
    times: np.ndarray  # (B, l)
    row_valid: np.ndarray  # (B, l)
    labels: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.sid.shape[0]


def collate(windows: list[TokenizedWindow]) -> Batch:
    if not windows:
        raise DataError("empty batch")
    ref = windows[0]
    for w in windows:
        if w.static_fields != ref.static_fields or w.dynamic_fields != ref.dynamic_fields:
            raise DataError("windows in one batch must share a field layout")
    return Batch(
        sid=np.stack([w.sid for w in windows]),
        sorig=np.stack([w.sorig for w in windows]),
        sind=np.stack([w.sind for w in windows]),
        did=np.stack([w.did for w in windows]),
        dorig=np.stack([w.dorig for w in windows]),
        dind=np.stack([w.dind for w in windows]),
        times=np.stack([w.times for w in windows]),
        row_valid=np.stack([w.row_valid for w in windows]),
        labels=np.asarray([w.label for w in windows], dtype=np.int32),
    )


# -- shard persistence -----------------------------------------------------

SHARD_VERSION = 1


def write_shard(
    out_dir, name: str, windows: list[TokenizedWindow], *,
    vocab_digest: str, time_scale: float, extra: dict | None = None,
) -> Path:
    """Persist unmasked windows as `<name>.manifest.json` plus `<name>.bin`.

    Token and validity arrays are little-endian 32-bit integers; the scaled
    time array is little-endian 32-bit float (times are real-valued). The
    manifest records dtype, shape, and byte offset per array.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not windows:
        raise DataError("refusing to write an empty shard")
    ref = windows[0]
    has_gap = ref.gap_ids is not None
    arrays = {
        "static_ids": np.stack([w.sid for w in windows]).astype("<i4"),
        "dynamic_ids": np.stack([w.did for w in windows]).astype("<i4"),
        "row_valid": np.stack([w.row_valid for w in windows]).astype("<i4"),
        "labels": np.asarray([w.label for w in windows], dtype="<i4"),
        "pad_counts": np.asarray([w.pad_count for w in windows], dtype="<i4"),
        "times": np.stack([w.times for w in windows]).astype("<f4"),
    }
    if has_gap:
        arrays["gap_ids"] = np.stack([w.gap_ids for w in windows]).astype("<i4")

    entries = []
    offset = 0
    blob = bytearray()
    for arr_name, arr in arrays.items():
        raw = arr.tobytes(order="C")
        entries.append(
            {
                "name": arr_name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blob.extend(raw)
        offset += len(raw)

    manifest = {
        "format": SHARD_VERSION,
        "count": len(windows),
        "window_len": ref.length,
        "static_fields": list(ref.static_fields),
        "dynamic_fields": list(ref.dynamic_fields),
        "has_gap_field": has_gap,
        "vocab_digest": vocab_digest,
        "time_scale": time_scale,
        "seq_ids": [w.seq_id for w in windows],
        "arrays": entries,
    }
    if extra:
        manifest.update(extra)
    (out_dir / f"{name}.bin").write_bytes(bytes(blob))
    (out_dir / f"{name}.manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=False) + "\n"
    )
    return out_dir / f"{name}.manifest.json"


def read_shard(out_dir, name: str) -> tuple[list[TokenizedWindow], dict]:
    out_dir = Path(out_dir)
    mpath = out_dir / f"{name}.manifest.json"
    bpath = out_dir / f"{name}.bin"
    if not mpath.exists() or not bpath.exists():
        raise DataError(f"shard {name!r} not found under {out_dir}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != SHARD_VERSION:
        raise DataError("unknown shard format version")
    blob = bpath.read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise DataError(f"shard {name!r}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])

    sf = tuple(manifest["static_fields"])
    df = tuple(manifest["dynamic_fields"])
    n = manifest["count"]
    windows = []
    for i in range(n):
        sid = arrays["static_ids"][i].astype(np.int32)
        did = arrays["dynamic_ids"][i].astype(np.int32)
        row_valid = arrays["row_valid"][i].astype(bool)
        n_f = did.shape[1]
        windows.append(
            TokenizedWindow(
                seq_id=manifest["seq_ids"][i],
                pad_count=int(arrays["pad_counts"][i]),
                label=int(arrays["labels"][i]),
                static_fields=sf,
                dynamic_fields=df,
                sid=sid,
                sorig=sid.copy(),
                sind=np.ones(sid.shape, dtype=np.int8),
                scand=np.ones(sid.shape, dtype=bool),
                did=did,
                dorig=did.copy(),
                dind=np.ones(did.shape, dtype=np.int8),
                dcand=np.repeat(row_valid[:, None], n_f, axis=1)
                if n_f
                else np.zeros((did.shape[0], 0), bool),
                times=arrays["times"][i].astype(np.float32),
                row_valid=row_valid,
                gap_ids=arrays["gap_ids"][i].astype(np.int32)
                if manifest["has_gap_field"]
                else None,
            )
        )
    return windows, manifest


def write_windows_json(path, windows: list[TokenizedWindow]) -> None:
    """Debug form: windows as one human-readable JSON document."""
    doc = []
    for w in windows:
        doc.append(
            {
                "seq_id": w.seq_id,
                "pad_count": w.pad_count,
                "label": w.label,
                "static_fields": list(w.static_fields),
                "dynamic_fields": list(w.dynamic_fields),
                "static_ids": w.sid.tolist(),
                "dynamic_ids": w.did.tolist(),
                "gap_ids": None if w.gap_ids is None else w.gap_ids.tolist(),
                "times": [float(t) for t in w.times],
                "row_valid": w.row_valid.astype(int).tolist(),
            }
        )
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
