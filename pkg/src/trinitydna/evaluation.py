"""Zero-shot scoring and diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .genome_io import DnaRecord
from .model import (
    ModelConfig, ModelParams, encoder_from_embeddings, grc_from_embeddings, grc_inputs,
    hidden_states, lm_logits,
)
from .numerics import ContractError, RandomSource, Tensor
from .tokenizer import MASK, PAD, TokenSequence, encode

INFLUENCE_EPS = 1e-30


@dataclass
class ScoreReport:
    id: str
    ppl: float
    impact: float | None
    positions: int

    def to_json(self) -> dict:
        return {"id": self.id, "ppl": self.ppl, "impact": self.impact, "positions": self.positions}


def _ids(seq) -> np.ndarray:
    if isinstance(seq, TokenSequence):
        return seq.ids
    if isinstance(seq, DnaRecord):
        return encode(seq.bases).ids
    if isinstance(seq, str):
        return encode(seq).ids
    return np.asarray(seq, dtype=np.int64)


def _logits(ids: np.ndarray, params: ModelParams, config: ModelConfig) -> np.ndarray:
    with nx.no_grad():
        return lm_logits(hidden_states(ids, params, config), params).data


def _terms(logits: np.ndarray, rows, positions: np.ndarray, targets: np.ndarray):
    """(nll, 1/p) of each target; 1/p = sum_j exp(z_j - z_t), inf when it would overflow."""
    z = logits[rows, positions]                       # (P, V)
    zt = z[np.arange(len(positions)), targets][:, None]
    nll = -nx.log_softmax_np(z)[np.arange(len(positions)), targets]
    gap = z - zt
    with np.errstate(over="ignore"):
        inv = np.where(gap.max(-1) < 700.0, np.exp(np.minimum(gap, 700.0)).sum(-1), np.inf)
    return nll, inv


def _position_terms(seq, positions, params: ModelParams, config: ModelConfig,
                    sequential: bool = False, batch_size: int = 16):
    ids = _ids(seq)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.size == 0:
        raise ContractError("masked_ppl: no positions to score")
    if positions.min() < 0 or positions.max() >= len(ids):
        raise ContractError("masked_ppl: position out of range")
    if not sequential:
        inp = ids.copy()
        inp[positions] = MASK
        logits = _logits(inp, params, config)
        return _terms(logits, np.zeros(len(positions), dtype=np.int64), positions, ids[positions])
    nll = np.empty(len(positions))
    inv = np.empty(len(positions))
    for lo in range(0, len(positions), batch_size):
        chunk = positions[lo : lo + batch_size]
        inp = np.repeat(ids[None], len(chunk), axis=0)
        inp[np.arange(len(chunk)), chunk] = MASK
        logits = _logits(inp, params, config)
        nll[lo : lo + len(chunk)], inv[lo : lo + len(chunk)] = _terms(
            logits, np.arange(len(chunk)), chunk, ids[chunk])
    return nll, inv


def position_nll(seq, positions, params: ModelParams, config: ModelConfig,
                 sequential: bool = False) -> np.ndarray:
    """-log p(true token) at each position with that position replaced by MASK.

    Jointly (default) every listed position is masked in a single pass;
    ``sequential`` masks one position per pass.
    """
    return _position_terms(seq, positions, params, config, sequential)[0]


def masked_ppl(seq, positions, params: ModelParams, config: ModelConfig,
               sequential: bool = False) -> float:
    """exp(mean masked-position NLL) over the full output vocabulary.

    This is the geometric mean of 1/p; when all terms coincide (e.g. a
    uniform model) it is returned directly, so a uniform model scores V.
    """
    nll, inv = _position_terms(seq, positions, params, config, sequential)
    if np.isfinite(inv[0]) and np.all(inv == inv[0]):
        return float(inv[0])
    return math.exp(float(nll.mean()))


def variant_positions(wt: str, mt: str) -> np.ndarray:
    if len(wt) != len(mt):
        raise ContractError(f"wild type and mutant lengths differ ({len(wt)} vs {len(mt)})")
    a = np.frombuffer(wt.encode("ascii"), dtype=np.uint8)
    b = np.frombuffer(mt.encode("ascii"), dtype=np.uint8)
    return np.flatnonzero(a != b)


def _bases(x) -> str:
    return x.bases if isinstance(x, DnaRecord) else str(x)


def mutation_impact(wt, mt, params: ModelParams, config: ModelConfig,
                    sequential: bool = False, positions=None) -> float:
    """masked_ppl(mt) - masked_ppl(wt), both masked at the variant positions.

    Implausible mutants score positive. ``positions`` overrides the variant
    set (the only way to score identical sequences).
    """
    wt_s, mt_s = _bases(wt), _bases(mt)
    if positions is None:
        positions = variant_positions(wt_s, mt_s)
        if positions.size == 0:
            raise ContractError("mutation_impact: wild type and mutant are identical")
    elif len(wt_s) != len(mt_s):
        raise ContractError("wild type and mutant lengths differ")
    return (masked_ppl(mt_s, positions, params, config, sequential)
            - masked_ppl(wt_s, positions, params, config, sequential))


def score_record(record: DnaRecord, params: ModelParams, config: ModelConfig,
                 groups: int = 7, window: int = 512, sequential: bool = False) -> ScoreReport:
    """Pseudo-perplexity of a whole record.

    The record is cut into tiles of ``window`` bases. Within a tile the
    A/C/G/T positions are split into ``groups`` interleaved sets and each set
    is masked jointly (7 groups is roughly the 15% training rate);
    ``sequential`` masks one position per pass instead.
    """
    if groups < 1 or window < 1:
        raise ContractError("groups and window must be >= 1")
    ids = encode(record.bases).ids
    total, count = 0.0, 0
    for lo in range(0, len(ids), window):
        tile = ids[lo : lo + window]
        scorable = np.flatnonzero(tile < 4)
        if scorable.size == 0:
            continue
        if sequential:
            total += float(position_nll(tile, scorable, params, config, sequential=True).sum())
        else:
            for g in range(groups):
                pos = scorable[g::groups]
                if pos.size:
                    total += float(position_nll(tile, pos, params, config).sum())
        count += int(scorable.size)
    if count == 0:
        raise ContractError(f"record {record.id!r} has no A/C/G/T positions to score")
    return ScoreReport(record.id, math.exp(total / count), None, count)


def score_pair(wt: DnaRecord, mt: DnaRecord, params: ModelParams, config: ModelConfig,
               sequential: bool = False) -> ScoreReport:
    """Mutant masked PPL at the variant positions plus the impact versus wild type."""
    pos = variant_positions(wt.bases, mt.bases)
    if pos.size == 0:
        raise ContractError(f"{wt.id!r} and {mt.id!r} are identical; nothing to score")
    ppl_mt = masked_ppl(mt.bases, pos, params, config, sequential)
    ppl_wt = masked_ppl(wt.bases, pos, params, config, sequential)
    return ScoreReport(mt.id, ppl_mt, ppl_mt - ppl_wt, int(pos.size))


# ---------------------------------------------------------------------------
# attention entropy


def row_entropy(probs: np.ndarray, allow: np.ndarray | None = None) -> np.ndarray:
    """-sum_j a_ij ln a_ij per row, over the allowed support (0 ln 0 = 0)."""
    p = probs if allow is None else np.where(allow, probs, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def attention_entropy(params: ModelParams, config: ModelConfig, ids) -> float:
    """Mean attention entropy (nats) over non-PAD queries, heads, layers and batch."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    trace: list = []
    with nx.no_grad():
        hidden_states(ids, params, config, trace=trace)
    if not trace:
        return 0.0
    pad = ids == PAD
    if config.grc_enabled:
        _, pad = grc_inputs(ids, pad)
    total, count = 0.0, 0
    for _, probs, allow in trace:
        ent = row_entropy(probs, allow)  # (B, h, N)
        keep = np.broadcast_to(~pad[:, None, :], ent.shape)
        total += float(ent[keep].sum())
        count += int(keep.sum())
    return total / count


def entropy_by_length(params: ModelParams, config: ModelConfig, lengths: Sequence[int],
                      n_seqs: int = 4, seed: int = 0) -> list[tuple[int, float]]:
    """Mean attention entropy on uniform-random sequences of each length."""
    rng = RandomSource(seed)
    rows = []
    for n in lengths:
        ids = rng.integers(0, 4, size=(n_seqs, int(n)))
        rows.append((int(n), attention_entropy(params, config, ids)))
    return rows


# ---------------------------------------------------------------------------
# influence


def influence_function(params: ModelParams, config: ModelConfig, seq, t: int):
    """(x0, f) where f maps embedding rows to y_t = ||final hidden state at t||_2.

    x0 has shape (S, N, H): S = 1 for the plain encoder, S = 2 under GRC
    (forward rows, then reverse-complement rows).
    """
    ids = _ids(seq)[None]
    n = ids.shape[1]
    if not 0 <= t < n:
        raise ContractError(f"target index {t} outside sequence of length {n}")
    pad = ids == PAD
    if config.grc_enabled:
        ids_in, pad_in = grc_inputs(ids, pad)
    else:
        ids_in, pad_in = ids, pad
    x0 = params["embed.weight"].data[ids_in]

    def f(x: Tensor) -> Tensor:
        if config.grc_enabled:
            h = grc_from_embeddings(x, 1, params, config, pad_in)
        else:
            h = encoder_from_embeddings(x, params, config, pad_in)
        row = nx.getitem(h, (0, t))
        return nx.sqrt(nx.tensor_sum(nx.mul(row, row)))

    return x0, f


def influence_gradients(params: ModelParams, config: ModelConfig, seq, t: int) -> np.ndarray:
    """d y_t / d x_s per position s, in forward coordinates: (N, S*H)."""
    x0, f = influence_function(params, config, seq, t)
    x = Tensor(x0.copy(), requires_grad=True)
    nx.backward(f(x))
    g = x.grad if x.grad is not None else np.zeros_like(x0)
    if config.grc_enabled:
        return np.concatenate([g[0], g[1][::-1]], axis=-1)
    return g[0]


def influence_profile(params: ModelParams, config: ModelConfig, seq, t: int) -> np.ndarray:
    """log10(||d y_t / d x_s||_2 + 1e-30) for every s."""
    g = influence_gradients(params, config, seq, t)
    return np.log10(np.linalg.norm(g, axis=-1) + INFLUENCE_EPS)


def influence_by_distance(params: ModelParams, config: ModelConfig, seq) -> list[tuple[int, float]]:
    """Mean log-influence for each distance t - s in [-N+1, N-1]."""
    n = len(_ids(seq))
    sums = np.zeros(2 * n - 1)
    counts = np.zeros(2 * n - 1)
    s_idx = np.arange(n)
    for t in range(n):
        prof = influence_profile(params, config, seq, t)
        d = t - s_idx + n - 1
        np.add.at(sums, d, prof)
        np.add.at(counts, d, 1)
    return [(int(d - n + 1), float(sums[d] / counts[d])) for d in range(2 * n - 1)]


# ---------------------------------------------------------------------------
# embeddings


def sequence_embedding(seq, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Mean of final hidden states over non-PAD positions, shape (H,)."""
    ids = _ids(seq)
    keep = ids != PAD
    if not keep.any():
        raise ContractError("sequence_embedding: sequence is entirely PAD")
    with nx.no_grad():
        h = hidden_states(ids, params, config).data[0]
    return h[keep].mean(axis=0)
