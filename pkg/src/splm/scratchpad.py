"""Scratchpad scheduling and the unrolled trunk sequence.

A trigger policy marks byte positions for transient scratchpad updates;
the precedence rule then suppresses any trigger that lands on a patch end
(patchification wins). The surviving schedule is unrolled into the trunk
input sequence [bos, sp(1,1)..sp(1,T1), committed(1), ...] with a
specialized causal mask: every element attends only to itself, bos, and
committed states of strictly earlier patches. Scratchpads are never
attended by anything else, which is what licenses dropping them from the
inference-time KV cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .patchify import DEFAULT_DELIMS, Segmentation


@dataclass(frozen=True)
class TriggerPolicy:
    """One of: none, dense, entropy (tau_sp), stride (S), whitespace (delims)."""
    kind: str
    tau_sp: float = 0.0
    stride: int = 1
    delims: frozenset = DEFAULT_DELIMS

    def __post_init__(self):
        if self.kind not in ("none", "dense", "entropy", "stride", "whitespace"):
            raise ValueError(f"unknown trigger policy {self.kind!r}")
        if self.kind == "entropy" and self.tau_sp < 0:
            raise ValueError("tau_sp must be >= 0")
        if self.kind == "stride" and self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class ScratchpadSchedule:
    """Post-precedence indicators p (bool per data position) and per-patch counts T."""
    p: np.ndarray
    T: np.ndarray

    @property
    def total(self) -> int:
        return int(self.T.sum())


def compute_triggers(policy: TriggerPolicy, segmentation: Segmentation,
                     entropies: np.ndarray | None = None,
                     data: np.ndarray | None = None) -> np.ndarray:
    """Raw per-position indicators, before precedence."""
    n = segmentation.n
    if policy.kind == "none":
        return np.zeros(n, dtype=bool)
    if policy.kind == "dense":
        return np.ones(n, dtype=bool)
    if policy.kind == "entropy":
        if entropies is None or len(entropies) != n:
            raise ValueError("entropy policy needs one entropy per data position")
        return np.asarray(entropies) > policy.tau_sp
    if policy.kind == "whitespace":
        if data is None or len(data) != n:
            raise ValueError("whitespace policy needs the data bytes")
        return np.isin(np.asarray(data), list(policy.delims))
    # stride: counting restarts at each patch start, so stride == patch width
    # reproduces the no-scratchpad baseline exactly
    raw = np.zeros(n, dtype=bool)
    for s, e in segmentation.spans:
        offs = np.arange(s, e + 1) - s + 1
        raw[s - 1:e] = offs % policy.stride == 0
    return raw


def apply_precedence(raw: np.ndarray, segmentation: Segmentation) -> ScratchpadSchedule:
    """Force p to False at every patch end and tally per-patch counts."""
    raw = np.asarray(raw, dtype=bool)
    if len(raw) != segmentation.n:
        raise ValueError(f"need {segmentation.n} indicators, got {len(raw)}")
    p = raw.copy()
    p[segmentation.ends() - 1] = False
    T = np.array([int(p[s - 1:e].sum()) for s, e in segmentation.spans], dtype=np.int64)
    return ScratchpadSchedule(p=p, T=T)


BOS, SCRATCHPAD, COMMITTED = 0, 1, 2


@dataclass(frozen=True)
class TrunkElement:
    kind: int              # BOS, SCRATCHPAD, or COMMITTED
    patch: int             # 0 for bos, else 1..L; doubles as the position index
    t: int                 # scratchpad ordinal within its patch (0 otherwise)
    span: tuple[int, int]  # inclusive encoder row span aggregated by this element


@dataclass(frozen=True)
class TrunkSequence:
    elements: tuple[TrunkElement, ...]

    def __len__(self):
        return len(self.elements)

    @property
    def positions(self) -> np.ndarray:
        return np.array([el.patch for el in self.elements], dtype=np.int64)

    @property
    def spans(self) -> np.ndarray:
        return np.array([el.span for el in self.elements], dtype=np.int64)

    def committed_index(self) -> np.ndarray:
        """Element index of committed(l) for l = 1..L."""
        return np.array([i for i, el in enumerate(self.elements)
                         if el.kind == COMMITTED], dtype=np.int64)


def build_trunk_sequence(segmentation: Segmentation,
                         schedule: ScratchpadSchedule) -> TrunkSequence:
    """bos, then per patch its scratchpads (by trigger position) and committed state.

    Scratchpad t of patch l aggregates the prefix (s_l, n_t) up to its
    trigger position; the committed element aggregates the full patch.
    """
    if len(schedule.p) != segmentation.n or len(schedule.T) != segmentation.L:
        raise ValueError("schedule inconsistent with segmentation")
    elements = [TrunkElement(BOS, 0, 0, (0, 0))]
    for l, (s, e) in enumerate(segmentation.spans, start=1):
        triggers = [n for n in range(s, e + 1) if schedule.p[n - 1]]
        if len(triggers) != schedule.T[l - 1]:
            raise ValueError(f"schedule count mismatch in patch {l}")
        for t, n in enumerate(triggers, start=1):
            elements.append(TrunkElement(SCRATCHPAD, l, t, (s, n)))
        elements.append(TrunkElement(COMMITTED, l, 0, (s, e)))
    return TrunkSequence(tuple(elements))


def build_mask(trunk_seq: TrunkSequence) -> np.ndarray:
    """allow[q][k] = (q == k) or (k is bos/committed and patch(k) < patch(q)).

    bos therefore attends only to itself, and scratchpad columns carry
    exactly one allowed entry (their own diagonal).
    """
    m = len(trunk_seq)
    patches = trunk_seq.positions
    kinds = np.array([el.kind for el in trunk_seq.elements])
    persistent = kinds != SCRATCHPAD  # bos and committed states
    allow = persistent[None, :] & (patches[None, :] < patches[:, None])
    np.fill_diagonal(allow, True)
    return allow
