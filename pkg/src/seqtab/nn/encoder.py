"""Bidirectional transformer encoder stack on the autodiff core.

Post-norm blocks: multi-head self-attention with additive masking of invalid
key positions, residual + layer norm, then a GELU feed-forward, residual +
layer norm. Invalid positions receive an attention bias large enough that
their weights underflow to exactly zero, so valid outputs are bit-for-bit
independent of whatever the padded slots contain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from ..errors import DataError
from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    dim: int
    layers: int
    heads: int
    ff_dim: int
    dropout: float = 0.1
    max_positions: int = 512

    def __post_init__(self):
        if self.dim <= 0 or self.layers < 0 or self.heads <= 0 or self.ff_dim <= 0:
            raise DataError("encoder dims must be positive")
        if self.dim % self.heads != 0:
            raise DataError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must be in [0, 1)")


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32):
    """Normal(0, std) truncated at two standard deviations."""
    vals = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(vals, dtype=dtype)


def init_encoder_params(
    prefix: str, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, Tensor]:
    """Weights ~ truncated normal, biases zero, layer-norm gain one offset zero."""
    d, ff = cfg.dim, cfg.ff_dim
    params: dict[str, Tensor] = {}

    def w(name, shape):
        params[name] = ad.parameter(truncated_normal(rng, shape, dtype=dtype))

    def b(name, shape):
        params[name] = ad.parameter(np.zeros(shape, dtype=dtype))

    def ln(name):
        params[f"{name}.g"] = ad.parameter(np.ones(d, dtype=dtype))
        params[f"{name}.b"] = ad.parameter(np.zeros(d, dtype=dtype))

    for i in range(cfg.layers):
        p = f"{prefix}.l{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{p}.attn.{proj}", (d, d))
        for proj in ("bq", "bk", "bv", "bo"):
            b(f"{p}.attn.{proj}", (d,))
        ln(f"{p}.ln1")
        w(f"{p}.ff.w1", (d, ff))
        b(f"{p}.ff.b1", (ff,))
        w(f"{p}.ff.w2", (ff, d))
        b(f"{p}.ff.b2", (d,))
        ln(f"{p}.ln2")
    return params


def encoder_forward(
    params: dict[str, Tensor],
    prefix: str,
    cfg: EncoderConfig,
    x: Tensor,
    valid: np.ndarray | None = None,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
    attn_sink: list | None = None,
) -> Tensor:
    """Run the stack over x of shape (B, T, dim); output keeps that shape.

    `valid` is a (B, T) boolean mask; invalid positions are excluded as
    attention keys. With zero layers the stack is the identity. Dropout only
    applies when `train` is set and an rng is supplied.
    """
    B, T, d = x.data.shape
    if d != cfg.dim:
        raise DataError(f"input dim {d} != encoder dim {cfg.dim}")
    if T > cfg.max_positions:
        raise DataError(f"sequence length {T} exceeds max positions {cfg.max_positions}")
    if not np.isfinite(x.data).all():
        raise DataError("non-finite encoder input")

    h = cfg.heads
    dk = d // h
    inv_sqrt_dk = 1.0 / math.sqrt(dk)
    use_dropout = train and rng is not None and cfg.dropout > 0.0
    if valid is not None:
        key_invalid = ~np.asarray(valid, dtype=bool)[:, None, None, :]  # (B,1,1,T)
    else:
        key_invalid = None

    def drop(t: Tensor) -> Tensor:
        return ad.dropout(t, cfg.dropout, rng) if use_dropout else t

    for i in range(cfg.layers):
        p = f"{prefix}.l{i}"

        def proj(name, inp):
            return ad.add(ad.matmul(inp, params[f"{p}.attn.{name[0]}"]),
                          params[f"{p}.attn.{name[1]}"])

        def heads_view(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (B, T, h, dk)), (0, 2, 1, 3))

        q = heads_view(proj(("wq", "bq"), x))
        k = heads_view(proj(("wk", "bk"), x))
        v = heads_view(proj(("wv", "bv"), x))

        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt_dk)
        if key_invalid is not None:
            logits = ad.masked_fill(logits, np.broadcast_to(key_invalid, logits.shape), ad.NEG_INF)
        attn = ad.softmax(logits, axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        attn = drop(attn)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
        ctx = drop(ad.add(ad.matmul(ctx, params[f"{p}.attn.wo"]), params[f"{p}.attn.bo"]))
        x = ad.layer_norm(ad.add(x, ctx), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])

        ffn = ad.gelu(ad.add(ad.matmul(x, params[f"{p}.ff.w1"]), params[f"{p}.ff.b1"]))
        ffn = drop(ad.add(ad.matmul(ffn, params[f"{p}.ff.w2"]), params[f"{p}.ff.b2"]))
        x = ad.layer_norm(ad.add(x, ffn), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    return x
