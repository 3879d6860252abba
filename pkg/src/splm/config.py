"""Run configuration files.

Plain-text format: bracketed section headers, ``key = value`` lines, '#'
comments. Unknown sections or keys, duplicate keys, and constraint
violations are rejected with the offending name (and line where known).
All defaults live in the SCHEMA table below.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass

from .layers import StackConfig
from .model import ModelConfig
from .patchify import DEFAULT_DELIMS, HNET_RATIO_WEIGHT, HNET_TARGET_SIZE
from .scratchpad import TriggerPolicy
from .train import TrainSettings


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_intlist(s: str):
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


# section -> key -> (parser, default). None default means "derived later".
SCHEMA = {
    "run": {
        "seed": (int, 0),
    },
    "model": {
        "dtype": (str, "f32"),
        "patchifier": (str, "fixed"),
        "patch_size": (int, 8),
        "tau_p": (float, 2.5),
        "delimiters": (_parse_intlist, tuple(sorted(DEFAULT_DELIMS))),
        "hnet_target_size": (float, HNET_TARGET_SIZE),
        "hnet_ratio_weight": (float, HNET_RATIO_WEIGHT),
        "hnet_smoothing": (_parse_bool, False),
        "trigger": (str, "entropy"),
        "tau_sp": (float, None),   # default depends on the patchifier family
        "stride": (int, 4),
        "trigger_delimiters": (_parse_intlist, tuple(sorted(DEFAULT_DELIMS))),
        "enc_layers": (int, 2),
        "enc_dim": (int, 64),
        "enc_ff": (int, 256),
        "enc_heads": (int, 0),     # 0 derives dim/64 (at least 1)
        "trunk_layers": (int, 2),
        "trunk_dim": (int, 128),
        "trunk_ff": (int, 512),
        "trunk_heads": (int, 0),
        "dec_layers": (int, 2),
        "dec_dim": (int, 64),
        "dec_ff": (int, 256),
        "dec_heads": (int, 0),
        "aux_layers": (int, 2),
        "rope_base": (float, 10000.0),
    },
    "train": {
        "byte_budget": (int, 20_000_000),
        "seq_len": (int, 256),
        "batch_size": (int, 8),
        "lr_peak": (float, 1e-3),
        "warmup_steps": (int, 200),
        "total_steps": (int, 0),
        "weight_decay": (float, 0.1),
        "grad_clip": (float, 1.0),
        "adam_eps": (float, 1e-12),
        "log_every": (int, 20),
        "ckpt_every": (int, 0),
        "out_dir": (str, "runs/default"),
    },
    "data": {
        "train_manifest": (str, None),
        "val_manifest": (str, None),
    },
    "eval": {
        "manifest": (str, None),
        "seq_len": (int, 256),
        "batch_size": (int, 8),
    },
}

# scratchpad entropy-trigger defaults per patchifier family
TAU_SP_DEFAULTS = {"fixed": 1.5, "spacebyte": 1.5, "entropy": 1.0, "hnet": 2.5}


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    train: TrainSettings
    train_manifest: str | None
    val_manifest: str | None
    eval_manifest: str | None
    eval_seq_len: int
    eval_batch_size: int


def _line_of(path: str, section: str, key: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            in_section = False
            for i, line in enumerate(fh, start=1):
                stripped = line.strip()
                if stripped.startswith("["):
                    in_section = stripped == f"[{section}]"
                elif in_section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
                    return f"{path}:{i}"
    except OSError:
        pass
    return path


def parse_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser(strict=True, interpolation=None,
                                       inline_comment_prefixes=("#",))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: duplicate key {exc.option!r} "
                          f"in [{exc.section}]")
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: duplicate section [{exc.section}]")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}")

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{_line_of(path, section, key)}: unknown key "
                                  f"{key!r} in [{section}]")
            fn, _ = SCHEMA[section][key]
            try:
                values[section][key] = fn(raw)
            except ValueError as exc:
                raise ConfigError(f"{_line_of(path, section, key)}: bad value for "
                                  f"{key!r}: {exc}")

    def get(section: str, key: str):
        if section in values and key in values[section]:
            return values[section][key]
        return SCHEMA[section][key][1]

    tau_sp = get("model", "tau_sp")
    if tau_sp is None:
        tau_sp = TAU_SP_DEFAULTS[get("model", "patchifier")] \
            if get("model", "patchifier") in TAU_SP_DEFAULTS else 1.5

    def stack(prefix: str, n_layers=None) -> StackConfig:
        dim = get("model", f"{prefix}_dim")
        heads = get("model", f"{prefix}_heads")
        return StackConfig(
            n_layers=n_layers if n_layers is not None else get("model", f"{prefix}_layers"),
            d_model=dim, d_ff=get("model", f"{prefix}_ff"),
            n_heads=heads if heads else max(1, dim // 64),
            rope_base=get("model", "rope_base"))

    try:
        trigger = TriggerPolicy(kind=get("model", "trigger"), tau_sp=tau_sp,
                                stride=get("model", "stride"),
                                delims=frozenset(get("model", "trigger_delimiters")))
        model_cfg = ModelConfig(
            encoder=stack("enc"), trunk=stack("trunk"), decoder=stack("dec"),
            aux=StackConfig(get("model", "aux_layers"), get("model", "enc_dim"),
                            get("model", "enc_ff"),
                            get("model", "enc_heads") or max(1, get("model", "enc_dim") // 64),
                            get("model", "rope_base")),
            patchifier=get("model", "patchifier"),
            patch_size=get("model", "patch_size"),
            tau_p=get("model", "tau_p"),
            delims=frozenset(get("model", "delimiters")),
            hnet_target_size=get("model", "hnet_target_size"),
            hnet_ratio_weight=get("model", "hnet_ratio_weight"),
            hnet_smoothing=get("model", "hnet_smoothing"),
            trigger=trigger,
            dtype=get("model", "dtype"))
    except ValueError as exc:
        raise ConfigError(f"{path}: [model] {exc}")

    train_cfg = TrainSettings(
        byte_budget=get("train", "byte_budget"),
        seq_len=get("train", "seq_len"),
        batch_size=get("train", "batch_size"),
        lr_peak=get("train", "lr_peak"),
        warmup_steps=get("train", "warmup_steps"),
        total_steps=get("train", "total_steps"),
        eps=get("train", "adam_eps"),
        weight_decay=get("train", "weight_decay"),
        grad_clip=get("train", "grad_clip"),
        log_every=get("train", "log_every"),
        ckpt_every=get("train", "ckpt_every"),
        out_dir=get("train", "out_dir"))
    if train_cfg.seq_len < 2:
        raise ConfigError(f"{path}: [train] seq_len must be >= 2")

    return RunConfig(seed=get("run", "seed"), model=model_cfg, train=train_cfg,
                     train_manifest=get("data", "train_manifest"),
                     val_manifest=get("data", "val_manifest"),
                     eval_manifest=get("eval", "manifest"),
                     eval_seq_len=get("eval", "seq_len"),
                     eval_batch_size=get("eval", "batch_size"))


def canonical_model_string(cfg: ModelConfig) -> str:
    """Deterministic rendering of everything that shapes the parameter set."""
    parts = []
    for name, st in (("enc", cfg.encoder), ("trunk", cfg.trunk),
                     ("dec", cfg.decoder), ("aux", cfg.aux)):
        parts.append(f"{name}={st.n_layers},{st.d_model},{st.d_ff},{st.n_heads},"
                     f"{st.rope_base!r}")
    parts.append(f"patchifier={cfg.patchifier},{cfg.patch_size},{cfg.tau_p!r}")
    parts.append(f"delims={sorted(cfg.delims)}")
    parts.append(f"hnet={cfg.hnet_target_size!r},{cfg.hnet_ratio_weight!r},"
                 f"{int(cfg.hnet_smoothing)}")
    parts.append(f"trigger={cfg.trigger.kind},{cfg.trigger.tau_sp!r},"
                 f"{cfg.trigger.stride},{sorted(cfg.trigger.delims)}")
    parts.append(f"dtype={cfg.dtype}")
    return ";".join(parts)
