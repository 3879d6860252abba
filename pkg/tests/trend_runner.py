"""Shared runner for the desk-scale trend experiment (and its pilot).

Trains three models with identical seeds and data order on a fixed byte
budget: fixed p=2 (no scratchpads), fixed p=8 (no scratchpads), and fixed
p=8 with entropy-triggered scratchpads. Reports validation BPB for each.
"""

import json
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import accept_corpus
from splm import metrics, model, train
from splm.layers import StackConfig
from splm.model import ModelConfig
from splm.scratchpad import TriggerPolicy
from splm.train import TrainSettings

SEED = 0
EVAL_SEQ_LEN = 256


def desk_config(patch_size: int, trigger: TriggerPolicy) -> ModelConfig:
    return ModelConfig(
        encoder=StackConfig(2, 64, 256, 1),
        trunk=StackConfig(2, 128, 512, 2),
        decoder=StackConfig(2, 64, 256, 1),
        aux=StackConfig(2, 64, 256, 1),
        patchifier="fixed", patch_size=patch_size, trigger=trigger, dtype="f32")


def variants():
    return {
        "fixed_p2": desk_config(2, TriggerPolicy("none")),
        "fixed_p8": desk_config(8, TriggerPolicy("none")),
        "fixed_p8_sp": desk_config(8, TriggerPolicy("entropy", tau_sp=1.5)),
    }


def run(byte_budget: int, out_path: str, lr: float = 3e-3,
        seq_len: int = 256, batch_size: int = 8) -> dict:
    train_path, val_path = accept_corpus.build()
    data = train_path.read_bytes()
    val = val_path.read_bytes()
    results: dict = {"byte_budget": byte_budget, "lr": lr, "runs": {}}
    for name, cfg in variants().items():
        t0 = time.time()
        params = model.init_params(cfg, seed=SEED)
        settings = TrainSettings(byte_budget=byte_budget, seq_len=seq_len,
                                 batch_size=batch_size, lr_peak=lr,
                                 warmup_steps=300, log_every=200)
        rows = train.train_loop(params, cfg, settings, data, seed=SEED)
        nats, count = metrics.bpb_on_bytes(params, cfg, val, EVAL_SEQ_LEN, 8)
        bpb = nats / (count * 0.6931471805599453)
        results["runs"][name] = {
            "params": model.n_params(params),
            "steps": settings.steps_for_budget(),
            "final_train_loss": rows[-1]["loss_main"],
            "val_bpb": bpb,
            "trunk_len_final": rows[-1]["trunk_len_mean"],
            "seconds": round(time.time() - t0, 1),
        }
        print(json.dumps({name: results["runs"][name]}), flush=True)
        pathlib.Path(out_path).write_text(json.dumps(results, indent=1))
    a = results["runs"]["fixed_p2"]["val_bpb"]
    b = results["runs"]["fixed_p8"]["val_bpb"]
    c = results["runs"]["fixed_p8_sp"]["val_bpb"]
    results["gap_closed"] = (b - c) / (b - a) if b != a else float("nan")
    results["trend_a_p8_worse_than_p2"] = b > a
    results["trend_b_sp_closes_quarter"] = c <= b - 0.25 * (b - a)
    pathlib.Path(out_path).write_text(json.dumps(results, indent=1))
    print(json.dumps({k: v for k, v in results.items() if k != "runs"}), flush=True)
    return results


if __name__ == "__main__":
    budget = int(sys.argv[1]) if len(sys.argv) > 1 else 2_000_000
    out = sys.argv[2] if len(sys.argv) > 2 else "build/trend_pilot.json"
    run(budget, out)
