"""ROC-AUC, principal component projection, and embedding export.

The AUC uses the rank formulation with average ranks for ties (a tied
positive/negative pair counts one half), which agrees exactly with the
all-pairs definition. The PCA route goes through an SVD of the centered data
so tests can cross-check it against an independent covariance
eigendecomposition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import Model
from .nn import autodiff as ad
from .pipeline import TokenizedWindow, collate


@dataclass(frozen=True)
class RocResult:
    auc: float
    n_pos: int
    n_neg: int
    tie_pairs: int


def roc_auc(scores, labels) -> RocResult:
    """Probability that a random positive outranks a random negative."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError("scores and labels must be equal-length vectors")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(s.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")

    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    tie_pairs = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[order[j]] == s[order[i]]:
            j += 1
        # Average rank for the tied group [i, j); ranks are 1-based.
        ranks[order[i:j]] = 0.5 * (i + j + 1)
        group_pos = int(pos[order[i:j]].sum())
        tie_pairs += group_pos * (j - i - group_pos)
        i = j
    r_pos = ranks[pos].sum()
    auc = (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return RocResult(float(auc), n_pos, n_neg, tie_pairs)


@dataclass(frozen=True)
class PcaResult:
    components: np.ndarray  # (k, dim), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing
    mean: np.ndarray  # (dim,)
    coords: np.ndarray  # (N, k)


def pca_fit_project(embeddings, k: int) -> PcaResult:
    """Top-k principal axes of the sample covariance plus projections.

    Signs are fixed so each component's largest-magnitude entry is positive,
    making results reproducible across runs and backends.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("need an (N >= 2, dim) embedding matrix")
    n, dim = x.shape
    if not 1 <= k <= min(n, dim):
        raise DataError(f"k={k} out of range for a {n}x{dim} matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    _, svals, vt = np.linalg.svd(xc, full_matrices=False)
    components = vt[:k].copy()
    variance = (svals[:k] ** 2) / (n - 1)
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    coords = xc @ components.T
    return PcaResult(components, variance, mean, coords)


WHICH_CHOICES = ("concat_window", "per_record", "static_row")


@dataclass
class EmbeddingExport:
    rows: np.ndarray  # (R, width)
    ids: list[str]
    tags: list[str]
    which: str


def _window_tag(tw: TokenizedWindow, vocab, tag_field: str | None) -> str:
    if tag_field is None or tag_field == "label":
        return str(tw.label)
    if tag_field in tw.static_fields:
        j = tw.static_fields.index(tag_field)
        return str(vocab.decode(int(tw.sid[j]))[1])
    if tag_field in tw.dynamic_fields:
        j = tw.dynamic_fields.index(tag_field)
        return str(vocab.decode(int(tw.did[-1, j]))[1])
    raise DataError(f"tag field {tag_field!r} not present in the windows")


def export_embeddings(
    model: Model,
    windows: list[TokenizedWindow],
    which: str = "concat_window",
    *,
    tag_field: str | None = None,
    batch_size: int = 256,
) -> EmbeddingExport:
    """Sequence-embedding table for downstream projection.

    ``concat_window``: one row per window, all sequence embeddings
    concatenated. ``per_record``: one row per non-padded record embedding.
    ``static_row``: the static-row embedding per window; unavailable when the
    mode replicates static fields (there is no static row). Rows are tagged
    with the window label or a chosen field's decoded value.
    """
    if which not in WHICH_CHOICES:
        raise DataError(f"unknown export {which!r}; pick one of {WHICH_CHOICES}")
    cfg = model.config
    if which == "static_row" and not cfg.has_static_row:
        raise DataError(f"mode {cfg.mode!r} has no static row to export")
    rows: list[np.ndarray] = []
    ids: list[str] = []
    tags: list[str] = []
    for start in range(0, len(windows), batch_size):
        chunk = windows[start : start + batch_size]
        se, _ = model.sequence_embeddings(collate(chunk))
        data = se.data
        for b, tw in enumerate(chunk):
            tag = _window_tag(tw, model.vocab, tag_field)
            wid = f"{tw.seq_id}:{start + b}"
            if which == "concat_window":
                rows.append(data[b].reshape(-1))
                ids.append(wid)
                tags.append(tag)
            elif which == "static_row":
                rows.append(data[b, 0])
                ids.append(wid)
                tags.append(tag)
            else:
                first_dyn = 1 if cfg.has_static_row else 0
                for i in range(tw.length):
                    if not tw.row_valid[i]:
                        continue  # padded records are dropped, by contract
                    rows.append(data[b, first_dyn + i])
                    ids.append(f"{wid}:{i}")
                    tags.append(tag)
    return EmbeddingExport(np.stack(rows), ids, tags, which)


def write_embedding_csv(path, ids: list[str], tags: list[str], coords: np.ndarray) -> None:
    path = Path(path)
    k = coords.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "tag"] + [f"c{i}" for i in range(k)])
        for i, (wid, tag) in enumerate(zip(ids, tags)):
            writer.writerow([wid, tag] + [f"{v:.8g}" for v in coords[i]])


_PALETTE = (
    "#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2",
    "#b279a2", "#eeca3b", "#9d755d", "#bab0ac", "#2f2f2f",
)


def write_scatter_svg(path, coords: np.ndarray, tags: list[str], *,
                      size: int = 480, margin: int = 36) -> None:
    """Quick-look scatter of the first two components, colored by tag."""
    if coords.shape[1] < 2:
        raise DataError("scatter needs at least two components")
    xy = coords[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    uniq = sorted(set(tags))
    color = {t: _PALETTE[i % len(_PALETTE)] for i, t in enumerate(uniq)}
    inner = size - 2 * margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (x, y), tag in zip(xy, tags):
        px = margin + (x - lo[0]) / span[0] * inner
        py = size - margin - (y - lo[1]) / span[1] * inner
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="{color[tag]}" fill-opacity="0.7"/>')
    for i, tag in enumerate(uniq):
        y = margin + 14 * i
        parts.append(f'<circle cx="{margin}" cy="{y}" r="4" fill="{color[tag]}"/>')
        parts.append(f'<text x="{margin + 8}" y="{y + 4}" font-size="11" font-family="sans-serif">{tag}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
