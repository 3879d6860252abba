"""Causal segmentation of data bytes into contiguous patches.

Four families: fixed width, delimiter ("spacebyte"), entropy threshold,
and a learned router ("hnet"). All spans use 1-based data byte indices
and every family decides "patch ends at n" from information at or before
n only; position N always closes the final patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_DELIMS = frozenset({0x20, 0x09, 0x0A, 0x0D})

HNET_THRESHOLD = 0.5
HNET_TARGET_SIZE = 6.0
HNET_RATIO_WEIGHT = 0.03


@dataclass(frozen=True)
class Segmentation:
    """Contiguous spans (s, e) covering data positions 1..N."""
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if not self.spans:
            raise ValueError("segmentation needs at least one span")
        if self.spans[0][0] != 1:
            raise ValueError(f"first span must start at 1, got {self.spans[0]}")
        prev_e = 0
        for s, e in self.spans:
            if s != prev_e + 1 or e < s:
                raise ValueError(f"spans not contiguous at ({s}, {e})")
            prev_e = e

    @property
    def L(self) -> int:
        return len(self.spans)

    @property
    def n(self) -> int:
        return self.spans[-1][1]

    def patch_of(self) -> np.ndarray:
        """patch index (1-based) per data position; shape [N+1], entry 0 unused."""
        out = np.zeros(self.n + 1, dtype=np.int64)
        for i, (s, e) in enumerate(self.spans, start=1):
            out[s:e + 1] = i
        return out

    def ends(self) -> np.ndarray:
        return np.array([e for _, e in self.spans], dtype=np.int64)


def _from_end_flags(is_end: np.ndarray) -> Segmentation:
    n = len(is_end)
    spans = []
    s = 1
    for i in range(1, n + 1):
        if is_end[i - 1] or i == n:
            spans.append((s, i))
            s = i + 1
    return Segmentation(tuple(spans))


def segment_fixed(n: int, p: int) -> Segmentation:
    """Width-p windows; the final span keeps the remainder."""
    if p < 1 or n < 1:
        raise ValueError(f"need p >= 1 and n >= 1, got p={p}, n={n}")
    spans = [(s, min(s + p - 1, n)) for s in range(1, n + 1, p)]
    return Segmentation(tuple(spans))


def segment_spacebyte(data: np.ndarray, delims=DEFAULT_DELIMS) -> Segmentation:
    """End a patch at the first delimiter of each delimiter run.

    A patch ends at n iff b_n is a delimiter and b_{n-1} is not (or n is
    the first byte), so runs of whitespace stay grouped; position N always
    closes the last patch.
    """
    data = np.asarray(data)
    n = len(data)
    is_d = np.isin(data, list(delims))
    ends = is_d.copy()
    ends[1:] &= ~is_d[:-1]
    return _from_end_flags(ends)


def segment_entropy(entropies: np.ndarray, tau_p: float, n: int) -> Segmentation:
    """Patch ends where next-byte entropy exceeds tau_p (or at N)."""
    entropies = np.asarray(entropies)
    if len(entropies) != n:
        raise ValueError(f"need {n} entropies, got {len(entropies)}")
    return _from_end_flags(entropies > tau_p)


def init_router(params: dict, prefix: str, d: int, rng, dtype, std: float = 0.02):
    """Two-layer MLP scoring (x_n, x_{n-1}) pairs, plus a learned start state."""
    from .layers import trunc_normal
    params[f"{prefix}/w1"] = ad.parameter(trunc_normal(rng, (2 * d, d), std, dtype))
    params[f"{prefix}/b1"] = ad.parameter(np.zeros(d, dtype=dtype))
    params[f"{prefix}/w2"] = ad.parameter(trunc_normal(rng, (d, 1), std, dtype))
    params[f"{prefix}/b2"] = ad.parameter(np.zeros(1, dtype=dtype))
    params[f"{prefix}/x0"] = ad.parameter(np.zeros(d, dtype=dtype))


def router_scores(params: dict, prefix: str, states: Tensor) -> Tensor:
    """Boundary scores in (0, 1) for data positions 1..N.

    states: [N, d] hidden states at data positions; the previous-state
    column for position 1 is the learned start vector.
    """
    n, d = states.shape
    x0 = ad.reshape(params[f"{prefix}/x0"], (1, d))
    prev = ad.concat([x0, ad.getitem(states, slice(0, n - 1))], axis=0)
    pair = ad.concat([states, prev], axis=1)
    h = ad.gelu(ad.add(ad.matmul(pair, params[f"{prefix}/w1"]), params[f"{prefix}/b1"]))
    logit = ad.add(ad.matmul(h, params[f"{prefix}/w2"]), params[f"{prefix}/b2"])
    return ad.reshape(ad.sigmoid(logit), (n,))


def segment_hnet(scores: np.ndarray, n: int,
                 threshold: float = HNET_THRESHOLD) -> Segmentation:
    """Patch ends where the router score exceeds the threshold (or at N)."""
    scores = np.asarray(scores)
    if len(scores) != n:
        raise ValueError(f"need {n} scores, got {len(scores)}")
    return _from_end_flags(scores > threshold)


def ratio_loss(scores: Tensor, target_size: float) -> Tensor:
    """(C * mean(scores) - 1)^2; zero when boundaries average one per C bytes."""
    if target_size <= 1:
        raise ValueError(f"target size must exceed 1, got {target_size}")
    m = ad.scale(ad.mean_all(scores), target_size)
    diff = ad.add(m, ad.constant(np.asarray(-1.0, dtype=scores.data.dtype)))
    return ad.mul(diff, diff)


def straight_through_scale(z: Tensor, score: Tensor) -> Tensor:
    """Multiply by 1 in the forward pass while routing gradient to ``score``.

    Forward value is z exactly (score - stop_grad(score) is exactly zero);
    backward treats the op as z * score so the router receives boundary
    gradient.
    """
    one = ad.constant(np.asarray(1.0, dtype=score.data.dtype))
    factor = ad.add(one, ad.add(score, ad.scale(ad.stop_gradient(score), -1.0)))
    return ad.mul(z, factor)
