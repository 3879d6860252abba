"""End-to-end training-mode forward pass.

Pipeline per batch: byte embedding -> encoder stack -> auxiliary entropy
head (detached) -> per-sequence segmentation and scratchpad schedule ->
span aggregation -> trunk over the unrolled patch sequence -> per-position
state selection and residual fusion -> decoder stack -> vocabulary heads.

Fusion rule per data position n in patch l (t = triggers fired at or
before n): the final byte of a patch uses the committed trunk state, any
position after a trigger uses the freshest scratchpad state, and anything
before the first trigger falls back to the previous patch's committed
state (bos output for the first patch).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import layers, patchify, scratchpad
from .autodiff import Tensor
from .corpus import VOCAB_SIZE, Batch
from .layers import AttentionMask, StackConfig
from .patchify import DEFAULT_DELIMS, Segmentation
from .scratchpad import ScratchpadSchedule, TriggerPolicy, TrunkSequence

DTYPES = {"f32": np.float32, "f64": np.float64}
PATCHIFIERS = ("fixed", "spacebyte", "entropy", "hnet")


@dataclass(frozen=True)
class ModelConfig:
    encoder: StackConfig
    trunk: StackConfig
    decoder: StackConfig
    aux: StackConfig
    patchifier: str = "fixed"
    patch_size: int = 8
    tau_p: float = 2.5
    delims: frozenset = DEFAULT_DELIMS
    hnet_target_size: float = patchify.HNET_TARGET_SIZE
    hnet_ratio_weight: float = patchify.HNET_RATIO_WEIGHT
    hnet_smoothing: bool = False
    trigger: TriggerPolicy = TriggerPolicy("none")
    dtype: str = "f32"

    def __post_init__(self):
        if self.patchifier not in PATCHIFIERS:
            raise ValueError(f"unknown patchifier {self.patchifier!r}")
        if self.encoder.d_model != self.decoder.d_model:
            raise ValueError("encoder and decoder widths must match for residual fusion")
        if self.aux.d_model != self.encoder.d_model:
            raise ValueError("aux head must run at encoder width")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if (self.patchifier == "entropy" and self.trigger.kind == "entropy"
                and not self.tau_p > self.trigger.tau_sp):
            raise ValueError(
                f"patch threshold tau_p={self.tau_p} must exceed "
                f"scratchpad threshold tau_sp={self.trigger.tau_sp}")
        if self.hnet_smoothing and self.patchifier != "hnet":
            raise ValueError("hnet_smoothing applies to the hnet patchifier only")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]


def init_params(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Every component is always allocated (router included), so the same
    parameter set can be reused under any patchifier or trigger policy."""
    rng = np.random.Generator(np.random.PCG64(seed))
    dt = config.np_dtype
    d_enc = config.encoder.d_model
    params: dict[str, Tensor] = {}
    params["embed/table"] = ad.parameter(layers.trunc_normal(rng, (VOCAB_SIZE, d_enc), 0.02, dt))
    layers.init_stack(params, "enc", config.encoder, rng, dt)
    layers.init_stack(params, "aux", config.aux, rng, dt)
    layers.init_norm(params, "aux/head/norm", d_enc, dt)
    params["aux/head/w"] = ad.parameter(layers.trunc_normal(rng, (d_enc, VOCAB_SIZE), 0.02, dt))
    layers.init_attention(params, "agg", d_enc, rng, dt)
    params["proj/enc2trunk"] = ad.parameter(
        layers.trunc_normal(rng, (d_enc, config.trunk.d_model), 0.02, dt))
    layers.init_stack(params, "trunk", config.trunk, rng, dt)
    params["proj/trunk2dec"] = ad.parameter(
        layers.trunc_normal(rng, (config.trunk.d_model, config.decoder.d_model), 0.02, dt))
    layers.init_stack(params, "dec", config.decoder, rng, dt)
    layers.init_norm(params, "dec/head/norm", config.decoder.d_model, dt)
    params["dec/head/w"] = ad.parameter(
        layers.trunc_normal(rng, (config.decoder.d_model, VOCAB_SIZE), 0.02, dt))
    patchify.init_router(params, "router", d_enc, rng, dt)
    for name, t in params.items():
        t.name = name
    return params


def n_params(params: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in params.values())


@functools.lru_cache(maxsize=32)
def _causal(t: int) -> AttentionMask:
    return layers.causal_mask(t)


@dataclass
class SeqStructure:
    """Per-sequence segmentation artifacts of one forward pass."""
    segmentation: Segmentation
    raw_triggers: np.ndarray
    schedule: ScratchpadSchedule
    trunk_seq: TrunkSequence


@dataclass
class ForwardTrace:
    """Everything the forward produced, for losses, metrics, and tests."""
    x: Tensor                    # encoder outputs [B, T, d_enc]
    aux_hidden: Tensor           # aux-layer states [B, T, d_enc]
    logits_aux: Tensor           # [B, T, V]
    entropies: np.ndarray        # H_n in nats [B, T]
    structs: list[SeqStructure]
    trunk_in: Tensor             # aggregated patch/scratchpad inputs [B, M, d_trunk]
    trunk_out: Tensor            # [B, M, d_trunk]
    fusion_table: Tensor         # decoder-width trunk states [B, M, d_dec]
    selection: np.ndarray        # element index per byte position [B, T]
    logits_main: Tensor          # [B, T, V]
    hnet_scores: list[Tensor] | None
    trunk_len: int


def segment_sequence(config: ModelConfig, data: np.ndarray,
                     entropies: np.ndarray | None,
                     router_score_values: np.ndarray | None) -> Segmentation:
    """Dispatch to the configured patchifier for one sequence."""
    n = len(data)
    if config.patchifier == "fixed":
        return patchify.segment_fixed(n, config.patch_size)
    if config.patchifier == "spacebyte":
        return patchify.segment_spacebyte(data, config.delims)
    if config.patchifier == "entropy":
        return patchify.segment_entropy(entropies, config.tau_p, n)
    return patchify.segment_hnet(router_score_values, n)


def selection_indices(seg: Segmentation, sched: ScratchpadSchedule,
                      trunk_seq: TrunkSequence) -> np.ndarray:
    """Trunk element index backing each byte position 0..N (0 -> bos)."""
    n = seg.n
    sel = np.zeros(n + 1, dtype=np.int64)
    committed = trunk_seq.committed_index()
    offset = 1  # element index where patch l's scratchpads begin
    for l, (s, e) in enumerate(seg.spans, start=1):
        t = 0
        for pos in range(s, e + 1):
            if sched.p[pos - 1]:
                t += 1
            if pos == e:
                sel[pos] = committed[l - 1]
            elif t >= 1:
                sel[pos] = offset + t - 1
            else:
                sel[pos] = committed[l - 2] if l > 1 else 0
        offset += sched.T[l - 1] + 1
    return sel


def state_span_end(seg: Segmentation, sched: ScratchpadSchedule) -> np.ndarray:
    """End of the span behind each data position's fused state (0 = bos)."""
    n = seg.n
    out = np.zeros(n, dtype=np.int64)
    for l, (s, e) in enumerate(seg.spans, start=1):
        last = s - 1 if l > 1 else 0
        for pos in range(s, e + 1):
            if sched.p[pos - 1]:
                last = pos
            out[pos - 1] = e if pos == e else last
    return out


def forward(params: dict[str, Tensor], config: ModelConfig,
            ids: np.ndarray) -> ForwardTrace:
    """Training-mode forward over a batch of id rows [B, T] (T = N+1)."""
    ids = np.atleast_2d(np.asarray(ids))
    b, t = ids.shape
    n = t - 1
    dt = config.np_dtype
    byte_pos = np.arange(t)
    cmask = _causal(t)

    x = layers.transformer_stack(params, "enc", ad.embedding(params["embed/table"], ids),
                                 cmask, byte_pos, config.encoder)
    aux_hidden, logits_aux, entropies = layers.aux_entropy_head(
        params, "aux", x, cmask, byte_pos, config.aux)

    hnet_scores: list[Tensor] | None = None
    if config.patchifier == "hnet":
        hnet_scores = [patchify.router_scores(params, "router",
                                              ad.getitem(aux_hidden, (i, slice(1, t))))
                       for i in range(b)]

    structs: list[SeqStructure] = []
    for i in range(b):
        data = ids[i, 1:]
        seg = segment_sequence(config, data, entropies[i, 1:],
                               hnet_scores[i].data if hnet_scores else None)
        raw = scratchpad.compute_triggers(config.trigger, seg,
                                          entropies=entropies[i, 1:], data=data)
        sched = scratchpad.apply_precedence(raw, seg)
        structs.append(SeqStructure(seg, raw, sched,
                                    scratchpad.build_trunk_sequence(seg, sched)))

    m_max = max(len(st.trunk_seq) for st in structs)
    spans = np.full((b, m_max, 2), -1, dtype=np.int64)
    allow = np.zeros((b, m_max, m_max), dtype=bool)
    allow[:, np.arange(m_max), np.arange(m_max)] = True  # padded rows self-attend
    positions = np.zeros((b, m_max), dtype=np.int64)
    selection = np.zeros((b, t), dtype=np.int64)
    for i, st in enumerate(structs):
        m = len(st.trunk_seq)
        spans[i, :m] = st.trunk_seq.spans
        allow[i, :m, :m] = scratchpad.build_mask(st.trunk_seq)
        positions[i, :m] = st.trunk_seq.positions
        selection[i] = selection_indices(st.segmentation, st.schedule, st.trunk_seq)

    z = layers.aggregate_many(params, "agg", x, spans,
                              config.encoder.n_heads, config.encoder.rope_base)
    if config.patchifier == "hnet":
        z = _router_scaled(z, structs, hnet_scores, m_max)
    trunk_in = ad.matmul(z, params["proj/enc2trunk"])
    trunk_out = layers.transformer_stack(params, "trunk", trunk_in,
                                         AttentionMask(allow), positions, config.trunk)
    fusion_table = ad.matmul(trunk_out, params["proj/trunk2dec"])
    if config.patchifier == "hnet" and config.hnet_smoothing:
        fusion_table = _smooth_committed(fusion_table, structs, hnet_scores, m_max)

    u = ad.add(ad.take_rows_batched(fusion_table, selection), x)
    dec_out = layers.transformer_stack(params, "dec", u, cmask, byte_pos, config.decoder)
    logits_main = layers.head_logits(params, "dec/head", dec_out)

    return ForwardTrace(x=x, aux_hidden=aux_hidden, logits_aux=logits_aux,
                        entropies=entropies, structs=structs, trunk_in=trunk_in,
                        trunk_out=trunk_out, fusion_table=fusion_table,
                        selection=selection, logits_main=logits_main,
                        hnet_scores=hnet_scores, trunk_len=m_max)


def _router_scaled(z: Tensor, structs, hnet_scores, m_max: int) -> Tensor:
    """Straight-through boundary-score scaling of committed patch vectors."""
    factors = []
    for i, st in enumerate(structs):
        ends = st.segmentation.ends()
        idx = np.zeros(m_max, dtype=np.int64)
        is_committed = np.zeros((m_max, 1), dtype=z.data.dtype)
        for j, el in enumerate(st.trunk_seq.elements):
            if el.kind == scratchpad.COMMITTED:
                idx[j] = ends[el.patch - 1] - 1
                is_committed[j] = 1.0
        sel = ad.reshape(ad.take_rows(hnet_scores[i], idx), (m_max, 1))
        delta = ad.add(sel, ad.scale(ad.stop_gradient(sel), -1.0))  # 0 forward
        factors.append(ad.reshape(ad.add(ad.constant(np.ones((m_max, 1), dtype=z.data.dtype)),
                                         ad.mul(delta, ad.constant(is_committed))),
                                  (1, m_max, 1)))
    return ad.mul(z, ad.concat(factors, axis=0))


def _smooth_committed(table: Tensor, structs, hnet_scores, m_max: int) -> Tensor:
    """Blend each committed trunk output with the previous one, weighted by
    the boundary score at the patch end."""
    dt = table.data.dtype
    mixed = []
    for i, st in enumerate(structs):
        ends = st.segmentation.ends()
        committed = st.trunk_seq.committed_index()
        score_idx = np.zeros(m_max, dtype=np.int64)
        prev_idx = np.arange(m_max, dtype=np.int64)
        is_committed = np.zeros((m_max, 1), dtype=dt)
        for rank, j in enumerate(committed):
            score_idx[j] = ends[rank] - 1
            prev_idx[j] = committed[rank - 1] if rank > 0 else 0
            is_committed[j] = 1.0
        row = ad.getitem(table, (i,))
        c = ad.reshape(ad.take_rows(hnet_scores[i], score_idx), (m_max, 1))
        blend_on = ad.constant(is_committed)
        # c*cur + (1-c)*prev on committed rows, identity elsewhere
        coef_cur = ad.add(ad.constant(np.ones((m_max, 1), dtype=dt)),
                          ad.mul(ad.add(c, ad.constant(np.full((m_max, 1), -1.0, dtype=dt))),
                                 blend_on))
        coef_prev = ad.mul(ad.add(ad.constant(np.ones((m_max, 1), dtype=dt)),
                                  ad.scale(c, -1.0)), blend_on)
        out = ad.add(ad.mul(row, coef_cur),
                     ad.mul(ad.take_rows(row, prev_idx), coef_prev))
        mixed.append(ad.reshape(out, (1, m_max, -1)))
    return ad.concat(mixed, axis=0)


@dataclass
class Losses:
    total: Tensor
    main: Tensor
    aux: Tensor
    ratio: Tensor | None


def losses(trace: ForwardTrace, config: ModelConfig, targets: np.ndarray,
           target_mask: np.ndarray) -> Losses:
    """Main and auxiliary next-byte losses plus the router ratio term.

    Main and aux are means over unpadded positions, summed with equal
    weight; the ratio term only exists for the learned-router family.
    """
    main = ad.cross_entropy(trace.logits_main, targets, target_mask)
    aux = ad.cross_entropy(trace.logits_aux, targets, target_mask)
    total = ad.add(main, aux)
    ratio = None
    if config.patchifier == "hnet":
        terms = [patchify.ratio_loss(s, config.hnet_target_size) for s in trace.hnet_scores]
        ratio = ad.scale(terms[0], 1.0 / len(terms)) if len(terms) == 1 else \
            ad.scale(functools.reduce(ad.add, terms), 1.0 / len(terms))
        total = ad.add(total, ad.scale(ratio, config.hnet_ratio_weight))
    return Losses(total=total, main=main, aux=aux, ratio=ratio)


def forward_losses(params: dict[str, Tensor], config: ModelConfig,
                   batch: Batch) -> tuple[ForwardTrace, Losses]:
    trace = forward(params, config, batch.ids)
    return trace, losses(trace, config, batch.targets, batch.target_mask)
