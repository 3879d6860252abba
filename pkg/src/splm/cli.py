"""Command-line entry points.

Subcommands: train, eval-bpb, generate, trace, flops, sweep. Every
command that loads a checkpoint also requires the config file that
produced it (checkpoints carry only a config digest). Reports are
line-delimited JSON on stdout; generate writes raw bytes.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import checkpoint, corpus, infer, metrics, model, train
from .config import ConfigError, RunConfig, parse_config
from .infer import KnobError, SamplerConfig, Session, with_knobs
from .metrics import RunStats


def _load_model(args) -> tuple[RunConfig, dict]:
    run = parse_config(args.config)
    params = model.init_params(run.model, seed=run.seed)
    checkpoint.load_into(params, args.ckpt, run.model)
    return run, params


def _eval_files(run: RunConfig, data_arg: str | None) -> list[str]:
    manifest = data_arg or run.eval_manifest or run.val_manifest
    if manifest is None:
        raise ConfigError("no evaluation data: pass --data or set [eval] manifest")
    return corpus.read_manifest(manifest)


def cmd_train(args) -> int:
    run = parse_config(args.config)
    if run.train_manifest is None:
        raise ConfigError(f"{args.config}: [data] train_manifest is required")
    data = corpus.load_files(corpus.read_manifest(run.train_manifest))
    params = model.init_params(run.model, seed=run.seed)
    out_dir = args.out_dir or run.train.out_dir
    os.makedirs(out_dir, exist_ok=True)

    def write_ckpt(step, p):
        checkpoint.save(p, run.model, os.path.join(out_dir, f"step{step:08d}.ckpt"))

    log_path = os.path.join(out_dir, "metrics.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        train.train_loop(params, run.model, run.train, data, seed=run.seed,
                         checkpoint_writer=write_ckpt, log_stream=log)
    final = os.path.join(out_dir, f"step{run.train.steps_for_budget():08d}.ckpt")
    print(json.dumps({"done": True, "checkpoint": final, "log": log_path}))
    return 0


def cmd_eval_bpb(args) -> int:
    run, params = _load_model(args)
    files = _eval_files(run, args.data)
    report = metrics.bpb(params, run.model, files,
                         seq_len=run.eval_seq_len, batch_size=run.eval_batch_size)
    print(json.dumps({"bpb": report.overall, "bytes": report.total_bytes,
                      "nats": report.total_nats}))
    for cat, v in sorted(report.per_category.items()):
        print(json.dumps({"category": cat, "bpb": v}))
    for path, v in sorted(report.per_file.items()):
        print(json.dumps({"file": path, "bpb": v}))
    return 0


def cmd_generate(args) -> int:
    run, params = _load_model(args)
    if args.prompt_file == "-":
        prompt = sys.stdin.buffer.read()
    else:
        with open(args.prompt_file, "rb") as fh:
            prompt = fh.read()
    session = Session(params, run.model, tau_sp=args.tau_sp, tau_p=args.tau_p,
                      patch_size=args.patch_size)
    sampler = SamplerConfig(temperature=args.temperature, top_p=args.top_p,
                            seed=args.seed)
    out = infer.generate(session, prompt, args.max_new, sampler)
    sys.stdout.buffer.write(out)
    sys.stdout.buffer.flush()
    return 0


def cmd_trace(args) -> int:
    run, params = _load_model(args)
    with open(args.input, "rb") as fh:
        data = fh.read()
    rows = metrics.export_trace(params, run.model, data, tau_sp=args.tau_sp,
                                tau_p=args.tau_p, patch_size=args.patch_size)
    metrics.write_trace_csv(rows, args.out)
    print(json.dumps({"rows": len(rows), "out": args.out}))
    return 0


def _nominal_stats(run: RunConfig) -> RunStats:
    """Scratchpad-free trunk-length estimate when no data is supplied."""
    cfg = run.model
    t = run.train.seq_len + 1
    nominal_patch = {"fixed": cfg.patch_size, "hnet": cfg.hnet_target_size}.get(
        cfg.patchifier, 6.0)
    m = 1 + math.ceil((t - 1) / nominal_patch)
    return RunStats(mode="train", positions=t, n_seqs=1, sum_m=m, sum_m2=m * m,
                    router_positions=(t - 1) if cfg.patchifier == "hnet" else 0)


def cmd_flops(args) -> int:
    run = parse_config(args.config)
    if args.ckpt and args.data:
        params = model.init_params(run.model, seed=run.seed)
        checkpoint.load_into(params, args.ckpt, run.model)
        data = corpus.load_files(_eval_files(run, args.data))
        data = data[:run.eval_seq_len * run.eval_batch_size]
        batch = next(corpus.eval_batches(data, run.eval_seq_len, run.eval_batch_size))
        from . import autodiff as ad
        with ad.no_grad():
            trace = model.forward(params, run.model, batch.ids)
        stats = metrics.run_stats_from_trace(trace, run.model)
        nominal = False
    else:
        stats = _nominal_stats(run)
        nominal = True
    report = metrics.flops_estimate(run.model, stats)
    print(json.dumps({"nominal": nominal, "note": report.note,
                      "components": report.components, "total": report.total,
                      "flops_per_byte": report.per_byte,
                      "byte_ref_per_byte": report.reference_per_byte,
                      "reduction": report.reduction}))
    return 0


def cmd_sweep(args) -> int:
    run, params = _load_model(args)
    values = [float(v) for v in args.values.split(",")]
    data = corpus.load_files(_eval_files(run, args.data))
    rows = metrics.knob_sweep(params, run.model, data, args.knob, values,
                              seq_len=run.eval_seq_len,
                              batch_size=run.eval_batch_size)
    for row in rows:
        print(json.dumps(row))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splm",
                                     description="patch-based byte language model")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None, help="override [train] out_dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-bpb", help="bits-per-byte on held-out files")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None, help="manifest of evaluation files")
    p.set_defaults(fn=cmd_eval_bpb)

    p = sub.add_parser("generate", help="sample bytes from a trained model")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-file", required=True, help="'-' reads stdin")
    p.add_argument("--max-new", type=int, default=128)
    p.add_argument("--tau-sp", type=float, default=None)
    p.add_argument("--tau-p", type=float, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("trace", help="per-byte scheduling trace as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-sp", type=float, default=None)
    p.add_argument("--tau-p", type=float, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("flops", help="analytic FLOPs report")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--data", default=None)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("sweep", help="knob sweep: BPB and FLOPs per value")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--knob", required=True, choices=["tau_sp", "tau_p", "patch_size"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", default=None)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, KnobError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
