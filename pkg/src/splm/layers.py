"""Transformer building blocks.

Pre-norm stacks of masked multi-head attention (rotary positions) and GEGLU
feed-forward layers, plus the span aggregation cross-attention and the
auxiliary next-byte entropy head. Everything here is a pure function of a
parameter dict; parameter names are slash-delimited paths.

Shape conventions: byte-level activations are [B, T, d] with position 0
holding the bos sentinel; trunk activations are [B, M, d] where M is the
unrolled patch-sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class StackConfig:
    """Shape of one transformer stack. 0 layers means an identity stack."""
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.n_layers < 0 or self.d_model <= 0:
            raise ValueError(f"bad stack config {self}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary positions")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class AttentionMask:
    """Boolean allow-matrix with a cached additive float surrogate.

    ``allow`` is [Tq, Tk] or [B, Tq, Tk]. The additive form holds 0 where
    allowed and the most negative finite value where not; adding it to
    scores is bit-identical to writing the fill value as long as |score|
    stays far below the fill's rounding granularity, and it keeps masked
    keys from influencing outputs even at the bit level.
    """

    def __init__(self, allow: np.ndarray):
        allow = np.asarray(allow, dtype=bool)
        if allow.ndim not in (2, 3):
            raise ValueError(f"mask must be 2-d or 3-d, got shape {allow.shape}")
        if not allow.any(axis=-1).all():
            raise ValueError("attention mask has a row with no allowed key")
        self.allow = allow
        self._additive: dict = {}

    def additive(self, dtype) -> np.ndarray:
        """Additive surrogate broadcastable over a head axis: [(B,) 1, Tq, Tk]."""
        key = np.dtype(dtype)
        cached = self._additive.get(key)
        if cached is None:
            fill = ad.most_negative(key)
            arr = np.where(self.allow, key.type(0.0), key.type(fill))
            cached = self._additive[key] = arr[..., None, :, :]
        return cached


def causal_mask(t: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((t, t), dtype=bool)))


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled to +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def init_stack(params: dict, prefix: str, cfg: StackConfig, rng, dtype, std: float = 0.02):
    """Per layer: attention q/k/v/o, two norms, GEGLU gate/value/out."""
    d, f = cfg.d_model, cfg.d_ff
    out_std = std / math.sqrt(max(1, 2 * cfg.n_layers))
    for i in range(cfg.n_layers):
        p = f"{prefix}/l{i}"
        for nm in ("wq", "wk", "wv"):
            params[f"{p}/attn/{nm}"] = ad.parameter(trunc_normal(rng, (d, d), std, dtype))
        params[f"{p}/attn/wo"] = ad.parameter(trunc_normal(rng, (d, d), out_std, dtype))
        for nm in ("norm1", "norm2"):
            params[f"{p}/{nm}/g"] = ad.parameter(np.ones(d, dtype=dtype))
            params[f"{p}/{nm}/b"] = ad.parameter(np.zeros(d, dtype=dtype))
        params[f"{p}/ffn/wgate"] = ad.parameter(trunc_normal(rng, (d, f), std, dtype))
        params[f"{p}/ffn/wval"] = ad.parameter(trunc_normal(rng, (d, f), std, dtype))
        params[f"{p}/ffn/wout"] = ad.parameter(trunc_normal(rng, (f, d), out_std, dtype))


def init_norm(params: dict, prefix: str, d: int, dtype):
    params[f"{prefix}/g"] = ad.parameter(np.ones(d, dtype=dtype))
    params[f"{prefix}/b"] = ad.parameter(np.zeros(d, dtype=dtype))


def init_attention(params: dict, prefix: str, d: int, rng, dtype, std: float = 0.02):
    for nm in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}/{nm}"] = ad.parameter(trunc_normal(rng, (d, d), std, dtype))


# ---------------------------------------------------------------------------
# forward blocks
# ---------------------------------------------------------------------------

def affine_norm(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm_affine(x, params[f"{prefix}/g"], params[f"{prefix}/b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # [..., T, d] -> [..., H, T, hd]
    *lead, t, d = x.shape
    hd = d // n_heads
    x = ad.reshape(x, (*lead, t, n_heads, hd))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, T, hd] -> [..., T, d]
    *lead, h, t, hd = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ad.reshape(ad.transpose(x, axes), (*lead, t, h * hd))


def attention(params: dict, prefix: str, q_in: Tensor, kv_in: Tensor,
              mask: AttentionMask, pos_q: np.ndarray, pos_k: np.ndarray,
              n_heads: int, rope_base: float) -> Tensor:
    """Masked multi-head attention, queries and keys rotary-encoded.

    q_in: [..., Tq, d]; kv_in: [..., Tk, d]; positions are integer arrays
    broadcastable to the query/key time axes ([T] shared, or [B, T]).
    """
    d = q_in.shape[-1]
    hd = d // n_heads
    dtype = q_in.data.dtype

    q = _split_heads(ad.matmul(q_in, params[f"{prefix}/wq"]), n_heads)
    k = _split_heads(ad.matmul(kv_in, params[f"{prefix}/wk"]), n_heads)
    v = _split_heads(ad.matmul(kv_in, params[f"{prefix}/wv"]), n_heads)

    cos_q, sin_q = _pos_tables(pos_q, hd, rope_base, dtype)
    if pos_k is pos_q:
        cos_k, sin_k = cos_q, sin_q
    else:
        cos_k, sin_k = _pos_tables(pos_k, hd, rope_base, dtype)
    q = ad.rope(q, cos_q, sin_q)
    k = ad.rope(k, cos_k, sin_k)

    q = ad.scale(q, 1.0 / math.sqrt(hd))
    scores = ad.matmul(q, ad.swap_last2(k))          # [..., H, Tq, Tk]
    scores = ad.add(scores, ad.constant(mask.additive(dtype)))
    weights = ad.softmax(scores)
    out = ad.matmul(weights, v)
    return ad.matmul(_merge_heads(out), params[f"{prefix}/wo"])


_TABLE_CACHE: dict = {}


def _pos_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    positions = np.asarray(positions)
    key = (positions.tobytes(), positions.shape, head_dim, base, np.dtype(dtype).str)
    cached = _TABLE_CACHE.get(key)
    if cached is None:
        cos, sin = ad.rope_tables(positions, head_dim, base, dtype)
        if cos.ndim == 3:  # [B, T, hd] -> broadcast over heads
            cos, sin = cos[:, None], sin[:, None]
        if len(_TABLE_CACHE) > 512:
            _TABLE_CACHE.clear()
        cached = _TABLE_CACHE[key] = (cos, sin)
    return cached


def geglu_block(params: dict, prefix: str, x: Tensor) -> Tensor:
    """GEGLU feed-forward: value branch gated by gelu(gate branch)."""
    gate = ad.gelu(ad.matmul(x, params[f"{prefix}/wgate"]))
    val = ad.matmul(x, params[f"{prefix}/wval"])
    return ad.matmul(ad.mul(val, gate), params[f"{prefix}/wout"])


def transformer_stack(params: dict, prefix: str, x: Tensor, mask: AttentionMask,
                      positions: np.ndarray, cfg: StackConfig) -> Tensor:
    """Pre-norm residual stack; returns the input unchanged for 0 layers."""
    if x.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"stack {prefix} expects width {cfg.d_model}, got {x.shape[-1]}")
    for i in range(cfg.n_layers):
        p = f"{prefix}/l{i}"
        normed = affine_norm(params, f"{p}/norm1", x)
        x = ad.add(x, attention(params, f"{p}/attn", normed, normed, mask,
                                positions, positions, cfg.n_heads, cfg.rope_base))
        x = ad.add(x, geglu_block(params, f"{p}/ffn", affine_norm(params, f"{p}/norm2", x)))
    return x


def aggregate(params: dict, prefix: str, x: Tensor, span: tuple[int, int],
              n_heads: int, rope_base: float) -> Tensor:
    """Cross-attention summary of x rows [s, e] with its mean as the query.

    x: [T, d]; span uses inclusive row indices into x. Returns [d].
    The query carries position e; keys carry their own row positions.
    """
    s, e = span
    if e < s:
        raise ad.ShapeError(f"empty aggregation span ({s}, {e})")
    q = ad.reshape(ad.mean_over_span(x, s, e + 1), (1, -1))
    keys = ad.getitem(x, slice(s, e + 1))
    mask = AttentionMask(np.ones((1, e - s + 1), dtype=bool))
    out = attention(params, prefix, q, keys, mask,
                    np.array([e]), np.arange(s, e + 1), n_heads, rope_base)
    return ad.reshape(out, (-1,))


def aggregate_many(params: dict, prefix: str, x: Tensor, spans: np.ndarray,
                   n_heads: int, rope_base: float) -> Tensor:
    """Batched span aggregation.

    x: [B, T, d]; spans: int [B, M, 2] of inclusive row index pairs, padded
    rows marked by span (-1, -1) (they attend row 0 with a zero query and
    their output is ignored downstream). Returns [B, M, d].
    """
    b, t, d = x.shape
    m = spans.shape[1]
    dtype = x.data.dtype

    seg = np.zeros((b, m, t), dtype=dtype)
    allow = np.zeros((b, m, t), dtype=bool)
    pos_q = np.zeros((b, m), dtype=np.int64)
    for i in range(b):
        for j in range(m):
            s, e = spans[i, j]
            if s < 0:
                allow[i, j, 0] = True
                continue
            seg[i, j, s:e + 1] = dtype.type(1.0) / dtype.type(e - s + 1)
            allow[i, j, s:e + 1] = True
            pos_q[i, j] = e
    q = ad.matmul(ad.constant(seg), x)               # [B, M, d] span means
    pos_k = np.broadcast_to(np.arange(t), (b, t))
    return attention(params, prefix, q, x, AttentionMask(allow), pos_q, pos_k,
                     n_heads, rope_base)


def head_logits(params: dict, prefix: str, x: Tensor) -> Tensor:
    """Final norm then vocabulary projection."""
    return ad.matmul(affine_norm(params, f"{prefix}/norm", x), params[f"{prefix}/w"])


def aux_entropy_head(params: dict, prefix: str, x: Tensor, mask: AttentionMask,
                     positions: np.ndarray, cfg: StackConfig):
    """Next-byte entropy estimator over detached encoder states.

    Two extra causal layers and a vocabulary head; gradients never reach the
    encoder. Returns (hidden, logits, H) with H in nats, computed outside
    the graph (it only feeds discrete decisions).
    """
    h = transformer_stack(params, prefix, ad.stop_gradient(x), mask, positions, cfg)
    logits = head_logits(params, f"{prefix}/head", h)
    ent = ad.entropy_from_logits(logits.data)
    return h, logits, ent
