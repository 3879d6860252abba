"""Evaluation and efficiency accounting.

BPB is cross-entropy in nats per data byte divided by ln 2. FLOPs are
counted as multiply-accumulates x2 over matrix products only (norms,
activations, softmax, and rotary math excluded); training-mode attention
is charged at full masked-dense length, inference-mode attention at the
realized prefix lengths. The analytic model below mirrors the forward
implementations term for term, and the instrumented counter in the
autodiff layer verifies the match.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus, model
from .corpus import VOCAB_SIZE
from .infer import Session, TrunkEvent, with_knobs
from .layers import StackConfig
from .model import ForwardTrace, ModelConfig

FLOPS_NOTE = ("matmul multiply-accumulates x2 only; norms/activations excluded; "
              "training attention counted at full masked-dense length, "
              "inference attention at realized prefix lengths")


# ---------------------------------------------------------------------------
# analytic FLOPs model
# ---------------------------------------------------------------------------

@dataclass
class RunStats:
    """Realized shapes of one run, enough to reproduce its matmul count."""
    mode: str                    # "train" or "inference"
    positions: int               # byte positions per sequence, bos included
    n_seqs: int = 1
    sum_m: int = 0               # sum over sequences of unrolled trunk length
    sum_m2: int = 0              # sum of squared trunk lengths
    router_positions: int = 0    # data positions scored by the learned router
    trunk_events: list[TrunkEvent] = field(default_factory=list)

    @property
    def data_bytes(self) -> int:
        return self.n_seqs * (self.positions - 1)


def run_stats_from_trace(trace: ForwardTrace, config: ModelConfig) -> RunStats:
    t = trace.x.shape[1]
    ms = [len(st.trunk_seq) for st in trace.structs]
    b = len(trace.structs)
    return RunStats(mode="train", positions=t, n_seqs=b,
                    sum_m=sum(ms), sum_m2=sum(m * m for m in ms),
                    router_positions=b * (t - 1) if config.patchifier == "hnet" else 0)


def run_stats_from_session(session: Session) -> RunStats:
    p = len(session.x_rows)
    return RunStats(mode="inference", positions=p,
                    router_positions=(p - 1) if session.config.patchifier == "hnet" else 0,
                    trunk_events=list(session.trunk_events))


@dataclass
class FlopsReport:
    components: dict[str, float]
    total: float
    data_bytes: int
    per_byte: float
    reference_per_byte: float
    reduction: float
    note: str = FLOPS_NOTE

    def lines(self) -> list[str]:
        out = [f"# {self.note}"]
        for k, v in self.components.items():
            out.append(f"{k:20s} {v:.6g}")
        out.append(f"{'total':20s} {self.total:.6g}")
        out.append(f"{'per_byte':20s} {self.per_byte:.6g}")
        out.append(f"{'byte_ref_per_byte':20s} {self.reference_per_byte:.6g}")
        out.append(f"{'reduction':20s} {self.reduction:.6g}")
        return out


def _stack_train_flops(cfg: StackConfig, rows: float, rows_sq: float) -> float:
    """n_layers x (q/k/v/o projections, dense scores and values, GEGLU)."""
    d, f = cfg.d_model, cfg.d_ff
    per = 8 * rows * d * d + 4 * rows_sq * d + 6 * rows * d * f
    return cfg.n_layers * per


def _stack_step_flops(cfg: StackConfig, keys: int) -> float:
    """One incremental position attending over ``keys`` cached entries."""
    d, f = cfg.d_model, cfg.d_ff
    return cfg.n_layers * (8 * d * d + 4 * keys * d + 6 * d * f)


def flops_estimate(config: ModelConfig, stats: RunStats) -> FlopsReport:
    """Forward FLOPs of a run with the given realized shapes."""
    d_e = config.encoder.d_model
    d_t = config.trunk.d_model
    d_d = config.decoder.d_model
    comp: dict[str, float] = {}

    if stats.mode == "train":
        b, t = stats.n_seqs, stats.positions
        rows, rows_sq = b * t, b * t * t
        sm, sm2 = stats.sum_m, stats.sum_m2
        comp["encoder"] = _stack_train_flops(config.encoder, rows, rows_sq)
        comp["aux"] = _stack_train_flops(config.aux, rows, rows_sq)
        agg = 6 * sm * t * d_e + 4 * sm * d_e * d_e + 4 * rows * d_e * d_e
        router = stats.router_positions * (4 * d_e * d_e + 2 * d_e)
        comp["patchify_aggregate"] = agg + router + 2 * sm * d_e * d_t
        comp["trunk"] = _stack_train_flops(config.trunk, sm, sm2) + 2 * sm * d_t * d_d
        comp["decoder"] = _stack_train_flops(config.decoder, rows, rows_sq)
        comp["heads"] = 2 * rows * d_e * VOCAB_SIZE + 2 * rows * d_d * VOCAB_SIZE
    else:
        p = stats.positions
        prefix_sum = p * (p + 1) // 2  # position i attends i+1 keys
        for name, cfg in (("encoder", config.encoder), ("aux", config.aux),
                          ("decoder", config.decoder)):
            d, f = cfg.d_model, cfg.d_ff
            comp[name] = cfg.n_layers * (p * (8 * d * d + 6 * d * f)
                                         + 4 * prefix_sum * d)
        agg = sum(4 * d_e * d_e + 4 * ev.span_width * (d_e * d_e + d_e)
                  for ev in stats.trunk_events)
        router = stats.router_positions * (4 * d_e * d_e + 2 * d_e)
        comp["patchify_aggregate"] = agg + router \
            + len(stats.trunk_events) * 2 * d_e * d_t
        comp["trunk"] = sum(_stack_step_flops(config.trunk, ev.cached_before + 1)
                            for ev in stats.trunk_events) \
            + len(stats.trunk_events) * 2 * d_t * d_d
        comp["heads"] = 2 * p * d_e * VOCAB_SIZE + 2 * p * d_d * VOCAB_SIZE

    total = float(sum(comp.values()))
    data_bytes = max(1, stats.data_bytes)
    ref = reference_flops_per_byte(config, stats)
    per_byte = total / data_bytes
    return FlopsReport(components=comp, total=total, data_bytes=data_bytes,
                       per_byte=per_byte, reference_per_byte=ref,
                       reduction=ref / per_byte if per_byte else float("inf"))


def byte_reference_stack(config: ModelConfig) -> StackConfig:
    """Byte-level baseline for reduction factors: trunk-width layers at byte
    resolution, one stack as deep as encoder+trunk+decoder combined."""
    n = config.encoder.n_layers + config.trunk.n_layers + config.decoder.n_layers
    return StackConfig(n_layers=n, d_model=config.trunk.d_model,
                       d_ff=config.trunk.d_ff, n_heads=config.trunk.n_heads)


def reference_flops_per_byte(config: ModelConfig, stats: RunStats) -> float:
    ref = byte_reference_stack(config)
    t = stats.positions
    if stats.mode == "train":
        per_seq = _stack_train_flops(ref, t, t * t) + 2 * t * ref.d_model * VOCAB_SIZE
    else:
        prefix_sum = t * (t + 1) // 2
        per_seq = (ref.n_layers * (t * (8 * ref.d_model ** 2 + 6 * ref.d_model * ref.d_ff)
                                   + 4 * prefix_sum * ref.d_model)
                   + 2 * t * ref.d_model * VOCAB_SIZE)
    return per_seq / max(1, t - 1)


# ---------------------------------------------------------------------------
# bits per byte
# ---------------------------------------------------------------------------

@dataclass
class BpbReport:
    overall: float
    total_bytes: int
    total_nats: float
    per_file: dict[str, float]
    per_category: dict[str, float]


def bpb_on_bytes(params, config: ModelConfig, data: bytes,
                 seq_len: int = 256, batch_size: int = 8) -> tuple[float, int]:
    """(total nats, data bytes) of next-byte prediction over one blob."""
    nats = 0.0
    count = 0
    with ad.no_grad():
        for batch in corpus.eval_batches(data, seq_len, batch_size):
            trace = model.forward(params, config, batch.ids)
            nll = ad.nll_rows(trace.logits_main.data, batch.targets)
            nats += float(nll[batch.target_mask].sum())
            count += int(batch.target_mask.sum())
    return nats, count


def bpb(params, config: ModelConfig, files: list[str],
        seq_len: int = 256, batch_size: int = 8) -> BpbReport:
    """Validation bits-per-byte with per-file and per-category breakdowns.

    A file's category is its parent directory name (e.g. code/text/math).
    """
    if not files:
        raise ValueError("empty evaluation set")
    per_file: dict[str, float] = {}
    cat_nats: dict[str, float] = {}
    cat_bytes: dict[str, int] = {}
    total_nats = 0.0
    total_bytes = 0
    for path in files:
        with open(path, "rb") as fh:
            data = fh.read()
        if not data:
            continue
        nats, count = bpb_on_bytes(params, config, data, seq_len, batch_size)
        per_file[path] = nats / (count * math.log(2))
        cat = os.path.basename(os.path.dirname(path))
        cat_nats[cat] = cat_nats.get(cat, 0.0) + nats
        cat_bytes[cat] = cat_bytes.get(cat, 0) + count
        total_nats += nats
        total_bytes += count
    if total_bytes == 0:
        raise ValueError("evaluation files contain no data bytes")
    per_cat = {c: cat_nats[c] / (cat_bytes[c] * math.log(2)) for c in cat_nats}
    return BpbReport(overall=total_nats / (total_bytes * math.log(2)),
                     total_bytes=total_bytes, total_nats=total_nats,
                     per_file=per_file, per_category=per_cat)


# ---------------------------------------------------------------------------
# patch lag
# ---------------------------------------------------------------------------

@dataclass
class LagStats:
    mean: float
    max: int
    histogram: dict[int, int]


def patch_lag_stats(segmentation, schedule) -> LagStats:
    """Distance from each position to the end of the span behind its state."""
    ends = model.state_span_end(segmentation, schedule)
    lags = np.arange(1, segmentation.n + 1) - ends
    if (lags < 0).any():
        raise ValueError("negative patch lag; inconsistent inputs")
    hist: dict[int, int] = {}
    for v in lags.tolist():
        hist[v] = hist.get(v, 0) + 1
    return LagStats(mean=float(lags.mean()), max=int(lags.max()), histogram=hist)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

TRACE_HEADER = "position,byte,entropy,patch_boundary,scratchpad,suppressed,state_span_end,lag"


@dataclass
class TraceRow:
    position: int
    byte: int
    entropy: float
    patch_boundary: bool
    scratchpad: bool
    suppressed: bool
    state_span_end: int
    lag: int

    def csv(self) -> str:
        return (f"{self.position},{self.byte},{self.entropy:.6f},"
                f"{int(self.patch_boundary)},{int(self.scratchpad)},"
                f"{int(self.suppressed)},{self.state_span_end},{self.lag}")


def export_trace(params, config: ModelConfig, data: bytes,
                 tau_sp: float | None = None, tau_p: float | None = None,
                 patch_size: int | None = None) -> list[TraceRow]:
    """Per-byte scheduling trace of one sequence under optional knob overrides."""
    cfg = with_knobs(config, tau_sp, tau_p, patch_size)
    ids = corpus.encode(data)[None, :]
    with ad.no_grad():
        trace = model.forward(params, cfg, ids)
    st = trace.structs[0]
    seg, sched = st.segmentation, st.schedule
    is_end = np.zeros(seg.n + 1, dtype=bool)
    is_end[seg.ends()] = True
    span_end = model.state_span_end(seg, sched)
    rows = []
    for n in range(1, seg.n + 1):
        rows.append(TraceRow(
            position=n, byte=int(data[n - 1]),
            entropy=float(trace.entropies[0, n]),
            patch_boundary=bool(is_end[n]),
            scratchpad=bool(sched.p[n - 1]),
            suppressed=bool(st.raw_triggers[n - 1] and is_end[n]),
            state_span_end=int(span_end[n - 1]),
            lag=int(n - span_end[n - 1])))
    return rows


def write_trace_csv(rows: list[TraceRow], path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


# ---------------------------------------------------------------------------
# knob sweeps
# ---------------------------------------------------------------------------

def knob_sweep(params, config: ModelConfig, data: bytes, knob: str,
               values: list[float], seq_len: int = 256,
               batch_size: int = 8) -> list[dict]:
    """BPB, FLOPs/byte, and scheduling counts per knob value on fixed data."""
    rows = []
    for value in values:
        kw = {knob: value if knob != "patch_size" else int(value)}
        cfg = with_knobs(config, **kw)
        nats = 0.0
        count = 0
        scratchpads = 0
        committed = 0
        agg = None
        with ad.no_grad():
            for batch in corpus.eval_batches(data, seq_len, batch_size):
                trace = model.forward(params, cfg, batch.ids)
                nll = ad.nll_rows(trace.logits_main.data, batch.targets)
                nats += float(nll[batch.target_mask].sum())
                count += int(batch.target_mask.sum())
                scratchpads += sum(st.schedule.total for st in trace.structs)
                committed += sum(st.segmentation.L for st in trace.structs)
                stats = run_stats_from_trace(trace, cfg)
                if agg is None:
                    agg = stats
                else:
                    agg.n_seqs += stats.n_seqs
                    agg.sum_m += stats.sum_m
                    agg.sum_m2 += stats.sum_m2
                    agg.router_positions += stats.router_positions
        report = flops_estimate(cfg, agg)
        rows.append({"knob": knob, "value": value,
                     "bpb": nats / (count * math.log(2)),
                     "flops_per_byte": report.per_byte,
                     "scratchpads": scratchpads, "committed_patches": committed})
    return rows
