import json
import os

import numpy as np
import pytest

from splm import cli
from splm.config import ConfigError, parse_config

CFG = """
[run]
seed = 11

[model]
dtype = f32
patchifier = fixed
patch_size = 4
trigger = entropy
tau_sp = 1.5
enc_layers = 1
enc_dim = 32
enc_ff = 64
aux_layers = 1
trunk_layers = 1
trunk_dim = 32
trunk_ff = 64
dec_layers = 1
dec_dim = 32
dec_ff = 64

[train]
seq_len = 32
batch_size = 2
total_steps = 4
warmup_steps = 1
log_every = 1
out_dir = {out}

[data]
train_manifest = {train_man}

[eval]
manifest = {eval_man}
seq_len = 32
batch_size = 2
"""


@pytest.fixture
def workspace(tmp_path, rng):
    data_dir = tmp_path / "data" / "text"
    data_dir.mkdir(parents=True)
    payload = (b"het fen ark lum dor y sil ... " * 40)[:900]
    (data_dir / "train.bin").write_bytes(payload)
    (data_dir / "val.bin").write_bytes(payload[:300])
    train_man = tmp_path / "train.txt"
    train_man.write_text("data/text/train.bin\n")
    eval_man = tmp_path / "eval.txt"
    eval_man.write_text("data/text/val.bin\n")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CFG.format(out=tmp_path / "out", train_man=train_man,
                              eval_man=eval_man))
    return tmp_path, cfg


def run_cli(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfigParsing:
    def test_minimal_config_defaults(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[data]\ntrain_manifest = x.txt\n")
        run = parse_config(str(p))
        assert run.model.trigger.tau_sp == 1.5  # fixed-family default
        assert run.model.patch_size == 8
        assert run.train.lr_peak == 1e-3
        assert run.seed == 0

    def test_entropy_family_default_tau(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[model]\npatchifier = entropy\n")
        assert parse_config(str(p)).model.trigger.tau_sp == 1.0

    def test_threshold_constraint_rejected(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[model]\npatchifier = entropy\ntau_p = 1.0\ntau_sp = 1.5\n")
        with pytest.raises(ConfigError, match="tau_p"):
            parse_config(str(p))

    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[model]\npatch_size = 4\npatch_size = 8\n")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(str(p))

    def test_unknown_key_names_line(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[model]\nbogus_key = 3\n")
        with pytest.raises(ConfigError, match=r"m\.cfg:2.*bogus_key"):
            parse_config(str(p))

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[wat]\nx = 1\n")
        with pytest.raises(ConfigError, match="wat"):
            parse_config(str(p))

    def test_bad_value_diagnosed(self, tmp_path):
        p = tmp_path / "m.cfg"
        p.write_text("[train]\nseq_len = soup\n")
        with pytest.raises(ConfigError, match="seq_len"):
            parse_config(str(p))

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config("/nonexistent.cfg")


class TestEndToEnd:
    def train(self, cfg, capsys):
        code, out, err = run_cli(["train", "--config", cfg], capsys)
        assert code == 0, err
        done = json.loads(out.splitlines()[-1])
        assert os.path.exists(done["checkpoint"])
        return done["checkpoint"]

    def test_full_pipeline(self, workspace, capsys):
        tmp, cfg = workspace
        ckpt = self.train(cfg, capsys)

        code, out, _ = run_cli(["eval-bpb", "--config", cfg, "--ckpt", ckpt], capsys)
        assert code == 0
        head = json.loads(out.splitlines()[0])
        assert 0 < head["bpb"] < 12
        assert head["bytes"] == 300

        prompt = tmp / "prompt.txt"
        prompt.write_bytes(b"het fen")
        code, out, _ = run_cli(["generate", "--config", cfg, "--ckpt", ckpt,
                                "--prompt-file", prompt, "--max-new", 8,
                                "--temperature", 0, "--seed", 3], capsys)
        assert code == 0
        assert len(out.encode("utf-8", "surrogateescape")) == 8

        trace_out = tmp / "trace.csv"
        code, out, _ = run_cli(["trace", "--config", cfg, "--ckpt", ckpt,
                                "--input", tmp / "data/text/val.bin",
                                "--out", trace_out], capsys)
        assert code == 0
        lines = trace_out.read_text().splitlines()
        assert lines[0].startswith("position,byte,entropy")
        assert len(lines) == 301

        code, out, _ = run_cli(["flops", "--config", cfg], capsys)
        assert code == 0
        rep = json.loads(out)
        assert rep["nominal"] and rep["total"] > 0

        code, out, _ = run_cli(["flops", "--config", cfg, "--ckpt", ckpt,
                                "--data", tmp / "eval.txt"], capsys)
        assert code == 0
        assert not json.loads(out)["nominal"]

        code, out, _ = run_cli(["sweep", "--config", cfg, "--ckpt", ckpt,
                                "--knob", "tau_sp", "--values", "0.5,1.5,2.5"],
                               capsys)
        assert code == 0
        rows = [json.loads(l) for l in out.splitlines()]
        assert len(rows) == 3
        flops = [r["flops_per_byte"] for r in rows]
        assert flops == sorted(flops, reverse=True)

    def test_generate_knob_constraint_exit_code(self, workspace, capsys, tmp_path):
        tmp, cfg = workspace
        # an entropy-family model with tau_sp >= tau_p must be refused
        text = cfg.read_text().replace("patchifier = fixed", "patchifier = entropy")
        cfg2 = tmp / "run2.cfg"
        cfg2.write_text(text)
        ckpt = self.train(cfg2, capsys)
        prompt = tmp / "p.txt"
        prompt.write_bytes(b"x")
        code, out, err = run_cli(["generate", "--config", cfg2, "--ckpt", ckpt,
                                  "--prompt-file", prompt, "--max-new", 1,
                                  "--tau-sp", 99], capsys)
        assert code == 1
        assert "tau" in err

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 2

    def test_digest_mismatch_fails_cleanly(self, workspace, capsys, tmp_path):
        tmp, cfg = workspace
        ckpt = self.train(cfg, capsys)
        other = tmp / "other.cfg"
        other.write_text(cfg.read_text().replace("patch_size = 4",
                                                 "patch_size = 8"))
        code, out, err = run_cli(["eval-bpb", "--config", other, "--ckpt", ckpt],
                                 capsys)
        assert code == 1
        assert "different model configuration" in err
