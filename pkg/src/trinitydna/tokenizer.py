"""Character-level tokenization and MLM corruption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genome_io import ParseError
from .numerics import ContractError, RandomSource

A, C, G, T, N, MASK, PAD = range(7)
BASE_VOCAB = "ACGTN"
VOCAB_SIZE = 7
ID_TO_CHAR = np.array(list("ACGTN?_"))

_LUT = np.full(256, -1, dtype=np.int64)
for _i, _ch in enumerate(BASE_VOCAB):
    _LUT[ord(_ch)] = _i

# complement of each token id; MASK and PAD map to themselves
COMPLEMENT_IDS = np.array([T, G, C, A, N, MASK, PAD], dtype=np.int64)

MASK_REPLACE, RANDOM_REPLACE, KEEP = 0, 1, 2

SELECT_PROB = 0.15
MASK_PROB = 0.80
RANDOM_PROB = 0.10
VARIABLE_BRANCH_PROB = 0.02


@dataclass
class TokenSequence:
    ids: np.ndarray
    pad_len: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        n = len(self.ids)
        if not 0 <= self.pad_len <= n:
            raise ContractError("pad_len outside sequence")
        if n and (self.ids.min() < 0 or self.ids.max() > PAD):
            raise ContractError("token id outside [0, 6]")
        body = self.ids[: n - self.pad_len]
        if (body == PAD).any() or (self.ids[n - self.pad_len :] != PAD).any():
            raise ContractError("PAD must occupy exactly the trailing pad_len positions")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def pad_mask(self) -> np.ndarray:
        m = np.zeros(len(self.ids), dtype=bool)
        if self.pad_len:
            m[-self.pad_len :] = True
        return m


@dataclass
class MaskingPlan:
    """Per selected position: action, original id and replacement id."""

    index: np.ndarray
    action: np.ndarray
    original: np.ndarray
    replacement: np.ndarray
    variable_branch: bool = False
    mask_prob: float = MASK_PROB

    def __len__(self) -> int:
        return len(self.index)

    @classmethod
    def empty(cls) -> "MaskingPlan":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())


def encode(bases: str, pad_len: int = 0) -> TokenSequence:
    """Map A,C,G,T,N to 0..4; the last ``pad_len`` positions become PAD."""
    raw = np.frombuffer(bases.encode("ascii", errors="replace"), dtype=np.uint8)
    ids = _LUT[raw]
    bad = np.flatnonzero(ids < 0)
    if bad.size:
        raise ParseError(f"invalid base {bases[bad[0]]!r}", position=int(bad[0]))
    if pad_len:
        ids = ids.copy()
        ids[len(ids) - pad_len :] = PAD
    return TokenSequence(ids, pad_len)


def decode(seq: TokenSequence | np.ndarray) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else np.asarray(seq)
    return "".join(ID_TO_CHAR[ids])


def reverse_complement_ids(ids: np.ndarray) -> np.ndarray:
    """Token-level reverse complement along the last axis."""
    return COMPLEMENT_IDS[np.asarray(ids)][..., ::-1]


def build_masking_plan(seq: TokenSequence, rng: RandomSource) -> MaskingPlan:
    """Sample the MLM corruption for one sequence.

    Each non-PAD position is selected with probability 0.15. Selected
    positions become MASK with probability p_mask, a random base with
    probability 0.10, and stay unchanged otherwise. p_mask is 0.80, except
    that with probability 0.02 per sequence it is drawn from U[0, 0.80].
    """
    n_real = len(seq) - seq.pad_len
    if n_real <= 0:
        raise ContractError("build_masking_plan: sequence has no non-PAD tokens")
    gen = rng.gen
    variable = bool(gen.random() < VARIABLE_BRANCH_PROB)
    p_mask = float(gen.uniform(0.0, MASK_PROB)) if variable else MASK_PROB

    index = np.flatnonzero(gen.random(n_real) < SELECT_PROB)
    u = gen.random(len(index))
    action = np.where(u < p_mask, MASK_REPLACE,
                      np.where(u < p_mask + RANDOM_PROB, RANDOM_REPLACE, KEEP))
    random_bases = gen.integers(0, 4, size=len(index))
    original = seq.ids[index]
    replacement = np.where(action == MASK_REPLACE, MASK,
                           np.where(action == RANDOM_REPLACE, random_bases, original))
    return MaskingPlan(index, action.astype(np.int64), original.copy(),
                       replacement.astype(np.int64), variable, p_mask)


def apply_masking_plan(seq: TokenSequence, plan: MaskingPlan) -> TokenSequence:
    if len(plan) and (plan.index.min() < 0 or plan.index.max() >= len(seq) - seq.pad_len):
        raise ContractError("masking plan index out of range")
    ids = seq.ids.copy()
    ids[plan.index] = plan.replacement
    return TokenSequence(ids, seq.pad_len)


def reconstruct(corrupted: TokenSequence, plan: MaskingPlan) -> TokenSequence:
    """Undo a masking plan."""
    ids = corrupted.ids.copy()
    ids[plan.index] = plan.original
    return TokenSequence(ids, corrupted.pad_len)


def plan_targets(plan: MaskingPlan, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (targets, selected) arrays for the loss."""
    targets = np.zeros(length, dtype=np.int64)
    selected = np.zeros(length, dtype=bool)
    targets[plan.index] = plan.original
    selected[plan.index] = True
    return targets, selected
