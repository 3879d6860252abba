"""Incremental byte-by-byte inference with scratchpad overriding.

A Session consumes one byte at a time. Byte-level stacks (encoder, aux,
decoder) keep ordinary append-only KV caches. The trunk cache holds bos
plus committed patch states ONLY: when a trigger fires, the scratchpad
state is computed on the fly, used to refresh the fusion state, and
immediately discarded, so trunk cache growth tracks patch boundaries and
nothing else.

All math goes through the same autodiff primitives as training (without
graph recording), so the per-position logits agree with the unrolled
training-mode forward up to floating-point reassociation.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS_ID
from .layers import StackConfig
from .model import ModelConfig
from .patchify import HNET_THRESHOLD


class KnobError(ValueError):
    pass


class SessionError(RuntimeError):
    pass


def with_knobs(config: ModelConfig, tau_sp: float | None = None,
               tau_p: float | None = None,
               patch_size: int | None = None) -> ModelConfig:
    """Post-hoc inference knobs: thresholds and fixed patch width.

    Each knob must match the model family it steers; the patch threshold
    must stay above the scratchpad threshold when both are entropy-driven.
    Parameters are untouched.
    """
    changes: dict = {}
    if tau_sp is not None:
        if config.trigger.kind != "entropy":
            raise KnobError(f"tau_sp override needs an entropy trigger policy, "
                            f"model uses {config.trigger.kind!r}")
        changes["trigger"] = dataclasses.replace(config.trigger, tau_sp=tau_sp)
    if tau_p is not None:
        if config.patchifier != "entropy":
            raise KnobError(f"tau_p override needs the entropy patchifier, "
                            f"model uses {config.patchifier!r}")
        changes["tau_p"] = tau_p
    if patch_size is not None:
        if config.patchifier != "fixed":
            raise KnobError(f"patch_size override needs the fixed patchifier, "
                            f"model uses {config.patchifier!r}")
        if patch_size < 1:
            raise KnobError("patch_size must be >= 1")
        changes["patch_size"] = patch_size
    if not changes:
        return config
    try:
        return dataclasses.replace(config, **changes)
    except ValueError as exc:
        raise KnobError(str(exc)) from exc


@dataclass(frozen=True)
class SamplerConfig:
    """Nucleus sampling settings; temperature 0 selects the argmax byte."""
    temperature: float = 0.2
    top_p: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")


@dataclass
class KVReport:
    trunk_entries: int
    byte_entries: int
    scratchpads_fired: int
    bytes_consumed: int

    @property
    def trunk_reduction(self) -> float:
        return self.bytes_consumed / (self.trunk_entries - 1)


@dataclass
class TrunkEvent:
    """One trunk run: how many cached entries it attended and the span width."""
    cached_before: int
    span_width: int
    committed: bool


class _StackCache:
    """Per-layer rotary-encoded key and value histories, [H, n, hd]."""

    def __init__(self, n_layers: int):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers

    def append(self, i: int, k: np.ndarray, v: np.ndarray):
        self.k[i] = k if self.k[i] is None else np.concatenate([self.k[i], k], axis=1)
        self.v[i] = v if self.v[i] is None else np.concatenate([self.v[i], v], axis=1)

    @property
    def length(self) -> int:
        return 0 if self.k[0] is None else self.k[0].shape[1]


def _heads(p: dict, name: str, h: Tensor, n_heads: int) -> Tensor:
    proj = ad.matmul(h, p[name])                 # [T, d]
    t, d = proj.shape
    return ad.transpose(ad.reshape(proj, (t, n_heads, d // n_heads)), (1, 0, 2))


def _norm(p: dict, prefix: str, h: Tensor) -> Tensor:
    return ad.layer_norm_affine(h, p[f"{prefix}/g"], p[f"{prefix}/b"])


class Session:
    """Single-threaded incremental decoding state over shared parameters."""

    def __init__(self, params: dict[str, Tensor], config: ModelConfig,
                 tau_sp: float | None = None, tau_p: float | None = None,
                 patch_size: int | None = None):
        self.params = params
        self.config = with_knobs(config, tau_sp, tau_p, patch_size)
        self.dtype = self.config.np_dtype
        self.enc_cache = _StackCache(config.encoder.n_layers)
        self.aux_cache = _StackCache(config.aux.n_layers)
        self.dec_cache = _StackCache(config.decoder.n_layers)
        self.trunk_cache = _StackCache(config.trunk.n_layers)
        self.x_rows: list[np.ndarray] = []      # encoder outputs per position
        self.bytes_consumed = 0
        self.committed_patches = 0
        self.patch_start = 1                    # data index opening the pending patch
        self.pending_triggers = 0
        self.scratchpads_fired = 0
        self.prev_byte: int | None = None
        self.prev_aux_state: np.ndarray | None = None
        self.trunk_events: list[TrunkEvent] = []
        self.finished = False
        self.last_logits: np.ndarray | None = None
        self._fusion: np.ndarray | None = None  # decoder-width trunk state for u_n
        self._raw_committed_fusion: np.ndarray | None = None  # pre-smoothing value
        self._last_boundary_score = 0.0
        with ad.no_grad():
            self._consume(BOS_ID, position=0)

    # -- incremental transformer machinery ---------------------------------

    def _stack_step(self, prefix: str, cfg: StackConfig, cache: _StackCache,
                    h: Tensor, pos: int) -> Tensor:
        p = self.params
        cos, sin = ad.rope_tables(np.array([pos]), cfg.head_dim, cfg.rope_base, self.dtype)
        for i in range(cfg.n_layers):
            lp = f"{prefix}/l{i}"
            normed = _norm(p, f"{lp}/norm1", h)
            q = ad.rope(_heads(p, f"{lp}/attn/wq", normed, cfg.n_heads), cos, sin)
            k = ad.rope(_heads(p, f"{lp}/attn/wk", normed, cfg.n_heads), cos, sin)
            v = _heads(p, f"{lp}/attn/wv", normed, cfg.n_heads)
            cache.append(i, k.data, v.data)
            att = self._attend(q, cache.k[i], cache.v[i], p[f"{lp}/attn/wo"], cfg)
            h = ad.add(h, att)
            h = ad.add(h, self._ffn(lp, h))
        return h

    def _attend(self, q: Tensor, k_all: np.ndarray, v_all: np.ndarray,
                wo: Tensor, cfg: StackConfig) -> Tensor:
        q = ad.scale(q, 1.0 / math.sqrt(cfg.head_dim))
        scores = ad.matmul(q, ad.constant(k_all.swapaxes(-1, -2)))
        out = ad.matmul(ad.softmax(scores), ad.constant(v_all))   # [H, 1, hd]
        merged = ad.reshape(ad.transpose(out, (1, 0, 2)), (1, cfg.d_model))
        return ad.matmul(merged, wo)

    def _ffn(self, lp: str, h: Tensor) -> Tensor:
        p = self.params
        normed = _norm(p, f"{lp}/norm2", h)
        gate = ad.gelu(ad.matmul(normed, p[f"{lp}/ffn/wgate"]))
        val = ad.matmul(normed, p[f"{lp}/ffn/wval"])
        return ad.matmul(ad.mul(val, gate), p[f"{lp}/ffn/wout"])

    def _aggregate(self, span_start: int, span_end: int) -> Tensor:
        """Cross-attention summary of stored encoder rows [s, e] (inclusive)."""
        p, cfg = self.params, self.config.encoder
        rows = ad.constant(np.concatenate(self.x_rows[span_start:span_end + 1], axis=0))
        q = ad.reshape(ad.mean_over_span(rows, 0, rows.shape[0]), (1, -1))
        cos_q, sin_q = ad.rope_tables(np.array([span_end]), cfg.head_dim,
                                      cfg.rope_base, self.dtype)
        cos_k, sin_k = ad.rope_tables(np.arange(span_start, span_end + 1),
                                      cfg.head_dim, cfg.rope_base, self.dtype)
        qh = ad.rope(_heads(p, "agg/wq", q, cfg.n_heads), cos_q, sin_q)
        kh = ad.rope(_heads(p, "agg/wk", rows, cfg.n_heads), cos_k, sin_k)
        vh = _heads(p, "agg/wv", rows, cfg.n_heads)
        qh = ad.scale(qh, 1.0 / math.sqrt(cfg.head_dim))
        w = ad.softmax(ad.matmul(qh, ad.swap_last2(kh)))
        out = ad.reshape(ad.transpose(ad.matmul(w, vh), (1, 0, 2)), (1, cfg.d_model))
        return ad.matmul(out, p["agg/wo"])

    def _trunk_run(self, z: Tensor, commit: bool) -> Tensor:
        """Push one aggregated state through the trunk over the committed cache.

        Scratchpad runs attend the cache plus themselves but leave no trace;
        committed runs append their per-layer keys/values.
        """
        p, cfg = self.params, self.config.trunk
        # bos carries position 0; every element of patch l carries position l
        pos = 0 if not self.trunk_events else self.committed_patches + 1
        cos, sin = ad.rope_tables(np.array([pos]), cfg.head_dim, cfg.rope_base, self.dtype)
        h = ad.matmul(z, p["proj/enc2trunk"])
        for i in range(cfg.n_layers):
            lp = f"trunk/l{i}"
            normed = _norm(p, f"{lp}/norm1", h)
            q = ad.rope(_heads(p, f"{lp}/attn/wq", normed, cfg.n_heads), cos, sin)
            k = ad.rope(_heads(p, f"{lp}/attn/wk", normed, cfg.n_heads), cos, sin)
            v = _heads(p, f"{lp}/attn/wv", normed, cfg.n_heads)
            if self.trunk_cache.k[i] is None:
                k_all, v_all = k.data, v.data
            else:
                k_all = np.concatenate([self.trunk_cache.k[i], k.data], axis=1)
                v_all = np.concatenate([self.trunk_cache.v[i], v.data], axis=1)
            if commit:
                self.trunk_cache.k[i] = k_all
                self.trunk_cache.v[i] = v_all
            att = self._attend(q, k_all, v_all, p[f"{lp}/attn/wo"], cfg)
            h = ad.add(h, att)
            h = ad.add(h, self._ffn(lp, h))
        return h

    # -- per-byte pipeline ---------------------------------------------------

    def _consume(self, token_id: int, position: int):
        p = self.params
        h = ad.reshape(ad.embedding(p["embed/table"], np.array([token_id])), (1, -1))
        x = self._stack_step("enc", self.config.encoder, self.enc_cache, h, position)
        self.x_rows.append(x.data)
        a = self._stack_step("aux", self.config.aux, self.aux_cache, x, position)
        aux_logits = ad.matmul(_norm(p, "aux/head/norm", a), p["aux/head/w"])
        entropy = float(ad.entropy_from_logits(aux_logits.data)[0])

        if position == 0:
            self._commit_patch(0, 0)
        else:
            n = position
            if self._is_boundary(n, token_id, entropy, a.data):
                self._commit_patch(self.patch_start, n)
                self.committed_patches += 1
                self.patch_start = n + 1
                self.pending_triggers = 0
            elif self._trigger_fires(n, token_id, entropy):
                self.pending_triggers += 1
                self.scratchpads_fired += 1
                z = self._aggregate(self.patch_start, n)
                out = self._trunk_run(z, commit=False)
                self.trunk_events.append(TrunkEvent(self.trunk_cache.length,
                                                    n - self.patch_start + 1, False))
                self._fusion = ad.matmul(out, p["proj/trunk2dec"]).data

        u = ad.add(ad.constant(self._fusion), ad.constant(self.x_rows[-1]))
        d = self._stack_step("dec", self.config.decoder, self.dec_cache, u, position)
        logits = ad.matmul(_norm(p, "dec/head/norm", d), p["dec/head/w"])
        self.last_logits = logits.data.reshape(-1)
        self.prev_byte = token_id if token_id < 256 else None
        # position 0 is bos: the router's previous-state column for the first
        # data byte is the learned start vector, never the bos state
        self.prev_aux_state = a.data if position > 0 else None

    def _commit_patch(self, span_start: int, span_end: int):
        cached = self.trunk_cache.length
        z = self._aggregate(span_start, span_end)
        out = self._trunk_run(z, commit=True)
        self.trunk_events.append(TrunkEvent(cached, span_end - span_start + 1, True))
        raw = ad.matmul(out, self.params["proj/trunk2dec"]).data
        if self.config.patchifier == "hnet" and self.config.hnet_smoothing \
                and self._raw_committed_fusion is not None:
            c = self.dtype(self._last_boundary_score)
            self._fusion = c * raw + (1 - c) * self._raw_committed_fusion
        else:
            self._fusion = raw
        self._raw_committed_fusion = raw

    def _is_boundary(self, n: int, byte: int, entropy: float,
                     aux_state: np.ndarray) -> bool:
        cfg = self.config
        if cfg.patchifier == "fixed":
            return n - self.patch_start + 1 == cfg.patch_size
        if cfg.patchifier == "spacebyte":
            return byte in cfg.delims and (self.prev_byte is None
                                           or self.prev_byte not in cfg.delims)
        if cfg.patchifier == "entropy":
            return entropy > cfg.tau_p
        score = self._router_score(aux_state)
        self._last_boundary_score = score
        return score > HNET_THRESHOLD

    def _router_score(self, aux_state: np.ndarray) -> float:
        p = self.params
        prev = (p["router/x0"].data.reshape(1, -1) if self.prev_aux_state is None
                else self.prev_aux_state)
        pair = ad.constant(np.concatenate([aux_state, prev], axis=1))
        h = ad.gelu(ad.add(ad.matmul(pair, p["router/w1"]), p["router/b1"]))
        logit = ad.add(ad.matmul(h, p["router/w2"]), p["router/b2"])
        return float(ad.sigmoid(logit).data[0, 0])

    def _trigger_fires(self, n: int, byte: int, entropy: float) -> bool:
        pol = self.config.trigger
        if pol.kind == "none":
            return False
        if pol.kind == "dense":
            return True
        if pol.kind == "entropy":
            return entropy > pol.tau_sp
        if pol.kind == "whitespace":
            return byte in pol.delims
        return (n - self.patch_start + 1) % pol.stride == 0

    # -- public surface -------------------------------------------------------

    def step(self, byte: int) -> np.ndarray:
        """Consume one data byte; returns logits for the following byte."""
        if self.finished:
            raise SessionError("step on a finished session")
        if not 0 <= byte <= 255:
            raise ValueError(f"byte out of range: {byte}")
        self.bytes_consumed += 1
        with ad.no_grad():
            self._consume(byte, self.bytes_consumed)
        return self.last_logits

    def close(self):
        self.finished = True

    def kv_report(self) -> KVReport:
        # counted structurally so the report stays valid for 0-layer stacks
        return KVReport(trunk_entries=1 + self.committed_patches,
                        byte_entries=len(self.x_rows),
                        scratchpads_fired=self.scratchpads_fired,
                        bytes_consumed=self.bytes_consumed)


def sample_byte(logits: np.ndarray, sampler: SamplerConfig,
                rng: np.random.Generator) -> int:
    """Nucleus sampling restricted to raw byte ids (sentinels never emitted)."""
    l = logits[:256].astype(np.float64)
    if sampler.temperature == 0.0:
        return int(np.argmax(l))
    l = l / sampler.temperature
    l -= l.max()
    p = np.exp(l)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    k = min(int(np.searchsorted(cum, sampler.top_p, side="left")) + 1, len(order))
    keep = order[:k]
    probs = p[keep] / p[keep].sum()
    return int(rng.choice(keep, p=probs))


def generate(session: Session, prompt: bytes, max_new: int,
             sampler: SamplerConfig) -> bytes:
    """Consume the prompt through step(), then sample-and-feed max_new bytes."""
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    for byte in prompt:
        session.step(byte)
    rng = np.random.Generator(np.random.PCG64(sampler.seed))
    out = bytearray()
    for _ in range(max_new):
        nxt = sample_byte(session.last_logits, sampler, rng)
        out.append(nxt)
        session.step(nxt)
    return bytes(out)
