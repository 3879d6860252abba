import numpy as np
import pytest

from splm.layers import StackConfig
from splm.model import ModelConfig, init_params
from splm.scratchpad import TriggerPolicy


def tiny_config(patchifier="fixed", trigger=None, dtype="f64",
                enc=(1, 32), trunk=(1, 32), dec=(1, 32), aux_layers=2,
                enc_heads=1, trunk_heads=2, **kw) -> ModelConfig:
    """Small f64 model covering every component; shapes stay family-independent."""
    trigger = trigger or TriggerPolicy("none")
    return ModelConfig(
        encoder=StackConfig(enc[0], enc[1], 2 * enc[1], enc_heads),
        trunk=StackConfig(trunk[0], trunk[1], 2 * trunk[1], trunk_heads),
        decoder=StackConfig(dec[0], dec[1], 2 * dec[1], enc_heads),
        aux=StackConfig(aux_layers, enc[1], 2 * enc[1], enc_heads),
        patchifier=patchifier, trigger=trigger, dtype=dtype, **kw)


def make_model(seed=0, **kw):
    cfg = tiny_config(**kw)
    return cfg, init_params(cfg, seed=seed)


def random_bytes(rng, n, text_like=False) -> bytes:
    if text_like:
        # mostly printable with occasional whitespace, so delimiter-driven
        # families get non-degenerate segmentations
        pool = list(range(97, 123)) + [32, 32, 10, 46]
        return bytes(rng.choice(pool, size=n).tolist())
    return bytes(rng.integers(0, 256, size=n).tolist())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
