"""Two-level encoder for windowed record sequences.

Level one turns each record's field tokens into one embedding: a static
field transformer runs once per window, a dynamic field transformer runs per
record. Level two adds a field-type embedding and a time-aware position
embedding, then a sequence encoder produces one output vector per row.

The time-aware position of record i is a sinusoid over
``tpos(i) = w_p * i + w_t * t_i + b`` with trainable scalars, so the model
sees both order and time-interval information; with (w_p, w_t, b) = (1, 0, 0)
it degenerates to the index-only sinusoid. Element j uses the frequency
``10000**(-2j/dim)``, sine on even j and cosine on odd j.

Mode switches reproduce the ablation variants:

- ``fata``: both field transformers, field-type embedding, time-aware
  positions; the static row shares the record-0 position vector.
- ``no_time_pos``: a learned absolute position table replaces the sinusoid;
  the quantized time gap rides along as an extra dynamic field by default.
- ``replicated_static``: single field transformer, static tokens replicated
  into every record, no field-type embedding; time-aware positions kept.
- ``both_off``: replication plus the learned position table; no time inputs
  at all unless the gap field is explicitly enabled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DataError
from .nn import EncoderConfig, Tensor, encoder_forward, init_encoder_params, truncated_normal
from .nn import autodiff as ad
from .pipeline import Batch, ModeLayout, TokenizedWindow, collate
from .schema import GAP_FIELD, Vocabulary

MODES = ("fata", "no_time_pos", "replicated_static", "both_off")


def sinusoid_frequencies(dim: int, dtype=np.float64) -> np.ndarray:
    j = np.arange(dim, dtype=np.float64)
    return (10000.0 ** (-2.0 * j / dim)).astype(dtype)


def time_position_embedding(w_p: float, w_t: float, b: float, index: int, t: float, dim: int) -> np.ndarray:
    """Reference sinusoid for one position; the model's tensor path must match."""
    tpos = w_p * index + w_t * t + b
    ang = tpos * sinusoid_frequencies(dim)
    out = np.where(np.arange(dim) % 2 == 0, np.sin(ang), np.cos(ang))
    return out


@dataclass
class ModelConfig:
    window_len: int
    static_fields: tuple[str, ...]
    dynamic_fields: tuple[str, ...]
    mode: str = "fata"
    use_time_field: bool | None = None
    dim: int = 64
    field_dim: int | None = None
    field_layers: int = 1
    field_heads: int = 2
    bert_layers: int = 2
    bert_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    max_positions: int = 512
    time_scale: float = 1.0
    gap_field: str = GAP_FIELD
    vocab_digest: str = ""
    dtype: str = "float32"

    def __post_init__(self):
        self.static_fields = tuple(self.static_fields)
        self.dynamic_fields = tuple(self.dynamic_fields)
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if self.use_time_field is None:
            self.use_time_field = self.mode == "no_time_pos"
        if self.field_dim is None:
            self.field_dim = self.dim
        if self.window_len < 1:
            raise DataError("window_len must be >= 1")
        if not self.dynamic_fields:
            raise DataError("model needs at least one dynamic field")
        if self.dtype not in ("float32", "float64"):
            raise DataError("dtype must be float32 or float64")
        # Raises on dim/head mismatch.
        self.field_encoder_config()
        self.sequence_encoder_config()

    # -- derived layout ------------------------------------------------------

    @property
    def folds_static(self) -> bool:
        return self.mode in ("replicated_static", "both_off")

    @property
    def uses_time_positions(self) -> bool:
        return self.mode in ("fata", "replicated_static")

    @property
    def eff_static_fields(self) -> tuple[str, ...]:
        return () if self.folds_static else self.static_fields

    @property
    def eff_dynamic_fields(self) -> tuple[str, ...]:
        dyn = self.dynamic_fields + ((self.gap_field,) if self.use_time_field else ())
        return (self.static_fields + dyn) if self.folds_static else dyn

    @property
    def has_static_row(self) -> bool:
        return len(self.eff_static_fields) > 0

    @property
    def rows(self) -> int:
        return self.window_len + (1 if self.has_static_row else 0)

    def layout(self) -> ModeLayout:
        return ModeLayout(use_time_field=self.use_time_field, fold_static=self.folds_static)

    def level_one_token_count(self) -> int:
        return len(self.eff_static_fields) + self.window_len * len(self.eff_dynamic_fields)

    def field_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.field_dim, self.field_layers, self.field_heads,
                             self.ff_dim, self.dropout, self.max_positions)

    def sequence_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.dim, self.bert_layers, self.bert_heads,
                             self.ff_dim, self.dropout, self.max_positions)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_json_dict(self) -> dict:
        return {
            "window_len": self.window_len,
            "static_fields": list(self.static_fields),
            "dynamic_fields": list(self.dynamic_fields),
            "mode": self.mode,
            "use_time_field": self.use_time_field,
            "dim": self.dim,
            "field_dim": self.field_dim,
            "field_layers": self.field_layers,
            "field_heads": self.field_heads,
            "bert_layers": self.bert_layers,
            "bert_heads": self.bert_heads,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
            "max_positions": self.max_positions,
            "time_scale": self.time_scale,
            "gap_field": self.gap_field,
            "vocab_digest": self.vocab_digest,
            "dtype": self.dtype,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["static_fields"] = tuple(d["static_fields"])
        d["dynamic_fields"] = tuple(d["dynamic_fields"])
        return cls(**d)


def init_model_params(config: ModelConfig, vocab: Vocabulary, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter set for a config; creation order is fixed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = config.np_dtype()
    params: dict[str, Tensor] = {}

    def tn(name, shape):
        params[name] = ad.parameter(truncated_normal(rng, shape, dtype=dtype))

    def zeros(name, shape):
        params[name] = ad.parameter(np.zeros(shape, dtype=dtype))

    fdim, d = config.field_dim, config.dim
    n_s = len(config.eff_static_fields)
    n_f = len(config.eff_dynamic_fields)

    tn("tok_emb", (vocab.total_size, fdim))
    if config.has_static_row:
        tn("sf.slot", (n_s, fdim))
        params.update(init_encoder_params("sf.enc", config.field_encoder_config(), rng, dtype))
        tn("sf.proj.w", (n_s * fdim, d))
        zeros("sf.proj.b", (d,))
    tn("df.slot", (n_f, fdim))
    params.update(init_encoder_params("df.enc", config.field_encoder_config(), rng, dtype))
    tn("df.proj.w", (n_f * fdim, d))
    zeros("df.proj.b", (d,))
    if config.has_static_row:
        tn("fe", (2, d))
    if config.uses_time_positions:
        params["tp.w_p"] = ad.parameter(np.asarray(1.0, dtype=dtype))
        params["tp.w_t"] = ad.parameter(np.asarray(1.0, dtype=dtype))
        params["tp.b"] = ad.parameter(np.asarray(0.0, dtype=dtype))
    else:
        tn("pos.table", (config.rows, d))
    params.update(init_encoder_params("sq.enc", config.sequence_encoder_config(), rng, dtype))
    for f in config.eff_static_fields:
        tn(f"mlm.s.{f}.w", (d, vocab.local_width(f)))
        zeros(f"mlm.s.{f}.b", (vocab.local_width(f),))
    for f in config.eff_dynamic_fields:
        tn(f"mlm.d.{f}.w", (d, vocab.local_width(f)))
        zeros(f"mlm.d.{f}.b", (vocab.local_width(f),))
    tn("cls.w", (config.rows * d, 1))
    zeros("cls.b", (1,))
    return params


class Model:
    """Parameters plus forward passes; one mutable instance per training run."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        digest = vocab.digest()
        if config.vocab_digest and config.vocab_digest != digest:
            raise CheckpointError("model config was built against a different vocabulary")
        config.vocab_digest = digest
        for f in config.eff_static_fields + config.eff_dynamic_fields:
            if f not in vocab.tables:
                raise DataError(f"field {f!r} required by the model is not in the vocabulary")
        self.config = config
        self.vocab = vocab
        self.dtype = config.np_dtype()
        self.params = params if params is not None else init_model_params(config, vocab, seed)
        d = config.dim
        self._inv_freq = sinusoid_frequencies(d, self.dtype).reshape(1, 1, d)
        even = (np.arange(d) % 2 == 0).astype(self.dtype)
        self._even = even.reshape(1, 1, d)
        self._odd = (1.0 - even).reshape(1, 1, d)

    # -- level one -------------------------------------------------------

    def _encode_fields(self, ids: np.ndarray, prefix: str, n_tokens: int,
                       train: bool, rng) -> Tensor:
        """Shared field-transformer pattern: embed, add slot, encode, project."""
        rows = ids.shape[0]
        emb = ad.embedding(self.params["tok_emb"], ids)
        emb = ad.add(emb, self.params[f"{prefix}.slot"])
        enc = encoder_forward(self.params, f"{prefix}.enc", self.config.field_encoder_config(),
                              emb, None, train=train, rng=rng)
        flat = ad.reshape(enc, (rows, n_tokens * self.config.field_dim))
        return ad.add(ad.matmul(flat, self.params[f"{prefix}.proj.w"]),
                      self.params[f"{prefix}.proj.b"])

    def static_record_embedding(self, sid: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """One embedding per window from the static tokens; runs once, no replication."""
        if not self.config.has_static_row:
            raise DataError("this mode has no static row")
        return self._encode_fields(sid, "sf", len(self.config.eff_static_fields), train, rng)

    def dynamic_record_embeddings(self, did: np.ndarray, train: bool = False, rng=None) -> Tensor:
        """(B, l, dim); each record encoded independently of its neighbours."""
        B, l, n_f = did.shape
        if (l, n_f) != (self.config.window_len, len(self.config.eff_dynamic_fields)):
            raise DataError(f"dynamic ids have shape {did.shape}, want (*, "
                            f"{self.config.window_len}, {len(self.config.eff_dynamic_fields)})")
        out = self._encode_fields(did.reshape(B * l, n_f), "df", n_f, train, rng)
        return ad.reshape(out, (B, l, self.config.dim))

    # -- level two -------------------------------------------------------

    def time_positions(self, times: np.ndarray) -> Tensor:
        """(B, l, dim) sinusoid over tpos = w_p * i + w_t * t_i + b."""
        B, l = times.shape
        i_vec = ad.const(np.arange(l), dtype=self.dtype)
        t = ad.const(times, dtype=self.dtype)
        tpos = ad.add(ad.add(ad.mul(self.params["tp.w_p"], i_vec),
                             ad.mul(self.params["tp.w_t"], t)),
                      self.params["tp.b"])
        ang = ad.mul(ad.reshape(tpos, (B, l, 1)), ad.const(self._inv_freq))
        return ad.add(ad.mul(ad.sin(ang), ad.const(self._even)),
                      ad.mul(ad.cos(ang), ad.const(self._odd)))

    def compose_inputs(self, te_s: Tensor | None, te_d: Tensor, times: np.ndarray,
                       row_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Sum record, field-type, and position embeddings into the encoder input."""
        cfg = self.config
        B, l = times.shape
        if cfg.uses_time_positions:
            pos = self.time_positions(times)
        else:
            table = self.params["pos.table"]
            pos = None  # added per-row below
        if cfg.has_static_row:
            fe_s = ad.narrow(self.params["fe"], 0, 0, 1)
            fe_d = ad.narrow(self.params["fe"], 0, 1, 1)
            row_s = ad.reshape(te_s, (B, 1, cfg.dim))
            if pos is not None:
                # The static row reuses the record-0 position vector.
                row_s = ad.add(row_s, ad.narrow(pos, 1, 0, 1))
                rows_d = ad.add(te_d, pos)
            else:
                rows_d = te_d
            ie = ad.concat([ad.add(row_s, fe_s), ad.add(rows_d, fe_d)], axis=1)
            if pos is None:
                ie = ad.add(ie, table)
            validity = np.concatenate([np.ones((B, 1), dtype=bool), row_valid], axis=1)
        else:
            ie = ad.add(te_d, pos) if pos is not None else ad.add(te_d, table)
            validity = np.asarray(row_valid, dtype=bool)
        return ie, validity

    def sequence_embeddings(self, batch: Batch, train: bool = False, rng=None,
                            attn_sink: list | None = None) -> tuple[Tensor, np.ndarray]:
        """(B, rows, dim) outputs of the sequence encoder plus row validity."""
        te_d = self.dynamic_record_embeddings(batch.did, train, rng)
        te_s = (self.static_record_embedding(batch.sid, train, rng)
                if self.config.has_static_row else None)
        times = batch.times.astype(self.dtype)
        ie, validity = self.compose_inputs(te_s, te_d, times, batch.row_valid)
        se = encoder_forward(self.params, "sq.enc", self.config.sequence_encoder_config(),
                             ie, validity, train=train, rng=rng, attn_sink=attn_sink)
        return se, validity

    # -- heads -----------------------------------------------------------

    def _split_rows(self, se: Tensor) -> tuple[Tensor | None, Tensor]:
        cfg = self.config
        B = se.data.shape[0]
        if cfg.has_static_row:
            se_s = ad.reshape(ad.narrow(se, 1, 0, 1), (B, cfg.dim))
            se_d = ad.narrow(se, 1, 1, cfg.window_len)
        else:
            se_s = None
            se_d = se
        return se_s, ad.reshape(se_d, (B * cfg.window_len, cfg.dim))

    def mlm_logits(self, se: Tensor) -> dict[str, Tensor]:
        """Per-field token logits: (B, W_f) for static fields, (B*l, W_f) for dynamic."""
        cfg = self.config
        se_s, se_d = self._split_rows(se)
        out: dict[str, Tensor] = {}
        for f in cfg.eff_static_fields:
            out[f] = ad.add(ad.matmul(se_s, self.params[f"mlm.s.{f}.w"]),
                            self.params[f"mlm.s.{f}.b"])
        for f in cfg.eff_dynamic_fields:
            out[f] = ad.add(ad.matmul(se_d, self.params[f"mlm.d.{f}.w"]),
                            self.params[f"mlm.d.{f}.b"])
        return out

    def mlm_probabilities(self, se: Tensor) -> dict[str, Tensor]:
        """Softmax token distributions per field head."""
        return {f: ad.softmax(t, axis=-1) for f, t in self.mlm_logits(se).items()}

    def mlm_loss(self, logits: dict[str, Tensor], batch: Batch) -> tuple[Tensor, int]:
        """Cross entropy restricted to masked positions, averaged over their count.

        Positions whose indicator is 1 carry weight zero, so the loss value
        and its gradient are exactly independent of their logits. Padded
        positions never contribute because the pipeline keeps their
        indicators at 1.
        """
        cfg = self.config
        count = int((1 - batch.sind).sum() + (1 - batch.dind).sum())
        if count == 0:
            warnings.warn("mlm_loss: no masked tokens in batch; loss is 0", stacklevel=2)
            return ad.const(np.zeros(()), dtype=self.dtype), 0
        pieces = []
        for j, f in enumerate(cfg.eff_static_fields):
            targets = self.vocab.to_local(f, batch.sorig[:, j])
            ce = ad.cross_entropy_with_logits(logits[f], targets)
            w = (1 - batch.sind[:, j]).astype(self.dtype)
            pieces.append(ad.reduce_sum(ad.mul(ce, ad.const(w))))
        for j, f in enumerate(cfg.eff_dynamic_fields):
            targets = self.vocab.to_local(f, batch.dorig[:, :, j].reshape(-1))
            ce = ad.cross_entropy_with_logits(logits[f], targets)
            w = (1 - batch.dind[:, :, j]).reshape(-1).astype(self.dtype)
            pieces.append(ad.reduce_sum(ad.mul(ce, ad.const(w))))
        return ad.scale(ad.add_n(pieces), 1.0 / count), count

    def pretrain_loss(self, batch: Batch, train: bool = False, rng=None) -> tuple[Tensor, int]:
        se, _ = self.sequence_embeddings(batch, train, rng)
        return self.mlm_loss(self.mlm_logits(se), batch)

    def classify_logits(self, se: Tensor) -> Tensor:
        """Single linear unit over the concatenated sequence embeddings."""
        cfg = self.config
        B = se.data.shape[0]
        flat = ad.reshape(se, (B, cfg.rows * cfg.dim))
        z = ad.add(ad.matmul(flat, self.params["cls.w"]), self.params["cls.b"])
        return ad.reshape(z, (B,))

    def classification_loss(self, batch: Batch, labels: np.ndarray,
                            train: bool = False, rng=None) -> Tensor:
        se, _ = self.sequence_embeddings(batch, train, rng)
        z = self.classify_logits(se)
        return ad.mean_all(ad.bce_with_logits(z, labels.astype(self.dtype)))

    def scores(self, windows: list[TokenizedWindow], batch_size: int = 256) -> np.ndarray:
        """Anomaly/label scores in (0, 1), evaluation mode, no graph."""
        out = []
        for i in range(0, len(windows), batch_size):
            batch = collate(windows[i : i + batch_size])
            se, _ = self.sequence_embeddings(batch)
            out.append(ad.sigmoid(self.classify_logits(se)).data)
        return np.concatenate(out)

    # -- parameter snapshots ----------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise CheckpointError("parameter names do not match the model config")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {k!r}")
            p.data = state[k].astype(self.dtype, copy=True)

    def head_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("cls.")]
