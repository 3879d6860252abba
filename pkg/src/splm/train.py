"""Optimization loop: AdamW with warmup-cosine schedule and global-norm clipping.

The loop is fully deterministic per (config, seed): batch order, parameter
updates, and the JSONL metrics log are bit-identical across runs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus, metrics, model
from .autodiff import Tensor
from .model import ModelConfig


@dataclass
class TrainSettings:
    byte_budget: int = 20_000_000
    seq_len: int = 256
    batch_size: int = 8
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 0           # 0: derived from the byte budget
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    log_every: int = 20
    ckpt_every: int = 0            # 0: only the final checkpoint
    out_dir: str = "runs/default"

    def steps_for_budget(self) -> int:
        if self.total_steps:
            return self.total_steps
        per_step = self.seq_len * self.batch_size
        return max(1, math.ceil(self.byte_budget / per_step))


def lr_at(step: int, peak: float, warmup_steps: int, total_steps: int,
          floor_frac: float = 0.1) -> float:
    """Linear warmup to the peak, then cosine decay to floor_frac * peak."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps == warmup_steps:
        return peak
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak * (floor_frac + (1 - floor_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def decay_mask(params: dict[str, Tensor]) -> dict[str, bool]:
    """Weight decay hits weight matrices only, never norms or embeddings."""
    return {name: t.data.ndim >= 2 and not name.startswith("embed/")
            for name, t in params.items()}


@dataclass
class OptimState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    decay: dict[str, bool]

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "OptimState":
        return cls(step=0,
                   m={n: np.zeros_like(t.data) for n, t in params.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.items()},
                   decay=decay_mask(params))


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.vdot(g, g).real)
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                params[name].grad = g * g.dtype.type(scale)
    return norm


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float,
               settings: TrainSettings):
    """Decoupled-weight-decay Adam update with bias correction.

    Missing gradients (parameters outside the active family) count as zero,
    so their moments still decay and weight decay still applies.
    """
    state.step += 1
    t = state.step
    b1, b2 = settings.beta1, settings.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        dt = p.data.dtype
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != param shape "
                                f"{p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        update = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(settings.eps))
        if state.decay[name] and settings.weight_decay:
            update = update + dt.type(settings.weight_decay) * p.data
        p.data = p.data - dt.type(lr) * update


def zero_grads(params: dict[str, Tensor]):
    for t in params.values():
        t.zero_grad()


def _batch_stream(data: bytes, settings: TrainSettings, seed: int):
    """Cycle epochs forever; each epoch reshuffles windows deterministically."""
    epoch = 0
    while True:
        yield from corpus.make_batches(data, settings.seq_len, settings.batch_size,
                                       seed + epoch)
        epoch += 1


def train_loop(params: dict[str, Tensor], config: ModelConfig,
               settings: TrainSettings, data: bytes, seed: int,
               checkpoint_writer=None, log_stream=None,
               probe_every: int = 0, probe_fn=None) -> list[dict]:
    """Run the configured byte budget; returns the metrics log rows.

    One JSON object per logged step: step, losses, lr, flops per byte, and
    the mean unrolled trunk length. ``checkpoint_writer(step, params)`` is
    called every ``ckpt_every`` steps and at the end.
    """
    if not data:
        raise ValueError("empty training corpus")
    total_steps = settings.steps_for_budget()
    state = OptimState.init(params)
    stream = _batch_stream(data, settings, seed)
    log_rows: list[dict] = []
    for step in range(total_steps):
        batch = next(stream)
        zero_grads(params)
        trace, losses = model.forward_losses(params, config, batch)
        ad.backward(losses.total)
        grad_norm = clip_global_norm(params, settings.grad_clip)
        lr = lr_at(step, settings.lr_peak, settings.warmup_steps, total_steps)
        adamw_step(params, state, lr, settings)
        if probe_every and probe_fn and (step + 1) % probe_every == 0:
            probe_fn(step, params)
        if step % settings.log_every == 0 or step == total_steps - 1:
            row = _log_row(step, trace, losses, lr, grad_norm, config, batch)
            log_rows.append(row)
            if log_stream is not None:
                log_stream.write(json.dumps(row) + "\n")
                log_stream.flush()
        if checkpoint_writer and settings.ckpt_every and \
                (step + 1) % settings.ckpt_every == 0:
            checkpoint_writer(step + 1, params)
    if checkpoint_writer:
        checkpoint_writer(total_steps, params)
    return log_rows


def _log_row(step, trace, losses, lr, grad_norm, config, batch) -> dict:
    stats = metrics.run_stats_from_trace(trace, config)
    report = metrics.flops_estimate(config, stats)
    row = {
        "step": step,
        "loss_total": float(losses.total.data),
        "loss_main": float(losses.main.data),
        "loss_aux": float(losses.aux.data),
        "loss_ratio": float(losses.ratio.data) if losses.ratio is not None else 0.0,
        "lr": lr,
        "grad_norm": grad_norm,
        "flops_per_byte": report.per_byte,
        "trunk_len_mean": float(np.mean([len(st.trunk_seq) for st in trace.structs])),
    }
    return row
