"""MLM pre-training: optimizer, schedule, two-stage runs and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .genome_io import DnaRecord, parse_fasta, sample_window, tile_windows
from .model import (
    ModelConfig, ModelParams, check_params, hidden_states, init_params, ladder_windows,
    lm_logits, param_shapes, preset_config,
)
from .numerics import ConfigError, ContractError, Parameter, RandomSource
from .tokenizer import (
    A, T, TokenSequence, apply_masking_plan, build_masking_plan, encode, plan_targets,
)

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.95, 1e-8

CHECKPOINT_MAGIC = b"TDNA"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Loss or gradients became non-finite."""


class CheckpointVersionError(ValueError):
    pass


class CheckpointIntegrityError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    seq_len: int = 512
    batch_size: int = 8
    steps: int = 1000
    peak_lr: float = 1e-3
    warmup_steps: int | None = None
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    seed: int = 0
    corpus: list = field(default_factory=list)
    corpus_weights: list | None = None
    eval_corpus: list = field(default_factory=list)
    eval_every: int = 0
    eval_windows: int = 16
    grc_enabled: bool = True
    model_preset: str = "micro"
    model_overrides: dict = field(default_factory=dict)
    scratch: bool = False
    rescale_windows: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.seq_len < 1 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("seq_len and batch_size must be >= 1, steps >= 0")
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("peak_lr and weight_decay must be non-negative")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return max(1, self.steps // 100) if self.steps else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        over = dict(self.model_overrides)
        over.setdefault("grc_enabled", self.grc_enabled)
        return preset_config(self.model_preset, seq_len=self.seq_len, **over)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to peak, then cosine decay to ``min_lr_ratio * peak`` at ``steps``."""
    peak = config.peak_lr
    warm = config.effective_warmup
    if step < warm:
        return peak * step / warm
    floor = config.min_lr_ratio * peak
    span = config.steps - warm
    if span <= 0:
        return peak if step <= warm else floor
    progress = min(1.0, (step - warm) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_update(params: Sequence[Parameter], state: AdamWState, lr: float,
                 weight_decay: float) -> None:
    """One decoupled-weight-decay Adam step using each parameter's ``.grad``.

    Decay applies to matrices only (biases, gains and 1-D tensors are exempt).
    """
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        if lr == 0.0:
            continue
        if weight_decay and p.ndim >= 2:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if not math.isfinite(total):
        return total
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# batches


@dataclass
class MlmBatch:
    ids: np.ndarray        # corrupted input (B, N)
    targets: np.ndarray    # original ids (B, N)
    selected: np.ndarray   # loss positions (B, N)
    pad_mask: np.ndarray   # (B, N)


def make_example(bases: str, pad_len: int, rng: RandomSource,
                 max_tries: int = 100) -> tuple[TokenSequence, TokenSequence, "object"]:
    """Encode and corrupt one window, resampling until the plan selects something."""
    seq = encode(bases, pad_len)
    for _ in range(max_tries):
        plan = build_masking_plan(seq, rng)
        if len(plan):
            break
    else:
        raise ContractError("could not draw a non-empty masking plan")
    return seq, apply_masking_plan(seq, plan), plan


def collate(examples) -> MlmBatch:
    ids, targets, selected, pads = [], [], [], []
    for seq, corrupted, plan in examples:
        t, s = plan_targets(plan, len(seq))
        ids.append(corrupted.ids)
        targets.append(t)
        selected.append(s)
        pads.append(seq.pad_mask)
    return MlmBatch(np.stack(ids), np.stack(targets), np.stack(selected), np.stack(pads))


class WindowSampler:
    """Draws training windows from weighted corpora, records weighted by length."""

    def __init__(self, corpora: Sequence[Sequence[DnaRecord]], weights=None):
        corpora = [list(c) for c in corpora if len(c)]
        if not corpora:
            raise ConfigError("training corpus is empty")
        self.corpora = corpora
        w = np.ones(len(corpora)) if weights is None else np.asarray(weights, dtype=float)
        if len(w) != len(corpora) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("corpus_weights must match corpora and be non-negative")
        self.corpus_p = w / w.sum()
        self.record_p = []
        for c in corpora:
            lens = np.array([len(r) for r in c], dtype=float)
            self.record_p.append(lens / lens.sum())

    def draw(self, length: int, rng: RandomSource):
        ci = int(rng.gen.choice(len(self.corpora), p=self.corpus_p)) if len(self.corpora) > 1 else 0
        c = self.corpora[ci]
        ri = int(rng.gen.choice(len(c), p=self.record_p[ci])) if len(c) > 1 else 0
        return sample_window(c[ri], length, rng)

    def batch(self, batch_size: int, length: int, rng: RandomSource) -> MlmBatch:
        examples = []
        for _ in range(batch_size):
            w = self.draw(length, rng)
            examples.append(make_example(w.bases, w.pad_len, rng))
        return collate(examples)


# ---------------------------------------------------------------------------
# state and steps


@dataclass
class TrainState:
    model_config: ModelConfig
    params: ModelParams
    opt: AdamWState
    step: int
    rng: RandomSource
    train_config: TrainConfig | None = None


def fresh_state(config: TrainConfig) -> TrainState:
    mcfg = config.model_config()
    root = RandomSource(config.seed)
    params = init_params(mcfg, root.spawn(1))
    return TrainState(mcfg, params, AdamWState(), 0, root.spawn(2), config)


def mlm_loss(batch: MlmBatch, params: ModelParams, model_config: ModelConfig) -> nx.Tensor:
    hidden = hidden_states(batch.ids, params, model_config, batch.pad_mask)
    logits = lm_logits(hidden, params)
    return nx.cross_entropy_masked(logits, batch.targets, batch.selected)


def mlm_step(batch: MlmBatch, state: TrainState, config: TrainConfig,
             lr: float | None = None) -> float:
    """Forward, backward and one AdamW update; returns the pre-update loss."""
    params = list(state.params)
    state.params.zero_grad()
    loss = mlm_loss(batch, state.params, state.model_config)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {state.step}")
    nx.backward(loss)
    if config.clip_norm is not None:
        norm = clip_grad_norm(params, config.clip_norm)
        if not math.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {state.step}")
    if lr is None:
        lr = lr_at(state.step + 1, config)
    adamw_update(params, state.opt, lr, config.weight_decay)
    state.step += 1
    return value


def base_log_probs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax restricted to the four nucleotide logits A, C, G, T."""
    return nx.log_softmax_np(logits[..., A : T + 1])


def eval_batches(records: Sequence[DnaRecord], seq_len: int, n_windows: int,
                 batch_size: int, seed: int = 12345) -> list[MlmBatch]:
    """Fixed evaluation set: non-overlapping tiles with seeded masking."""
    rng = RandomSource(seed)
    windows = []
    for rec in records:
        for w in tile_windows(rec, seq_len):
            if w.pad_len < seq_len:
                windows.append(w)
            if len(windows) >= n_windows:
                break
        if len(windows) >= n_windows:
            break
    examples = [make_example(w.bases, w.pad_len, rng) for w in windows]
    return [collate(examples[i : i + batch_size]) for i in range(0, len(examples), batch_size)]


def eval_ppl(batches: Sequence[MlmBatch], params: ModelParams, model_config: ModelConfig) -> float:
    """exp(mean NLL) at masked positions whose target is A/C/G/T, over nucleotide logits."""
    total, count = 0.0, 0
    with nx.no_grad():
        for b in batches:
            logits = lm_logits(hidden_states(b.ids, params, model_config, b.pad_mask), params).data
            logp = base_log_probs(logits)
            sel = b.selected & (b.targets <= T)
            if not sel.any():
                continue
            picked = np.take_along_axis(logp, np.where(sel, b.targets, 0)[..., None], axis=-1)[..., 0]
            total -= float(picked[sel].sum())
            count += int(sel.sum())
    if count == 0:
        raise ContractError("evaluation set has no scorable positions")
    return math.exp(total / count)


def load_corpus(paths: Sequence[str]) -> list[list[DnaRecord]]:
    out = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            out.append(parse_fasta(fh))
    return out


def run_stage(config: TrainConfig, initial: TrainState | None = None, *,
              corpora: Sequence[Sequence[DnaRecord]] | None = None,
              eval_records: Sequence[DnaRecord] | None = None,
              resume: bool = False, until: int | None = None,
              log_fn: Callable[[dict], None] | None = None) -> TrainState:
    """Train one stage.

    With ``resume`` the initial state's step counter, optimizer moments and
    random stream continue; otherwise only its weights are reused and a new
    optimizer and stream start from ``config.seed``. ``until`` stops early
    at that global step (the schedule still spans ``config.steps``).
    """
    if config.stage == 2 and initial is None and not config.scratch:
        raise ConfigError("stage 2 needs an initial checkpoint (or scratch=True for the ablation)")
    if initial is not None and initial.train_config is not None and not resume:
        if config.seq_len < initial.train_config.seq_len:
            raise ConfigError(
                f"stage {config.stage} seq_len {config.seq_len} shorter than previous "
                f"{initial.train_config.seq_len}"
            )
    if corpora is None:
        corpora = load_corpus(config.corpus)
    if eval_records is None and config.eval_corpus:
        eval_records = [r for c in load_corpus(config.eval_corpus) for r in c]

    if initial is None:
        state = fresh_state(config)
    elif resume:
        state = initial
        state.train_config = config
    else:
        mcfg = ModelConfig.from_dict(initial.model_config.to_dict())
        if config.rescale_windows:
            mcfg.window_sizes = ladder_windows(config.seq_len, mcfg.heads)
        mcfg.grc_enabled = config.grc_enabled
        mcfg.validate()
        root = RandomSource(config.seed)
        state = TrainState(mcfg, initial.params.copy(), AdamWState(), 0, root.spawn(2), config)
    check_params(state.params, state.model_config)

    end = config.steps if until is None else min(until, config.steps)
    if state.step >= end:
        return state
    sampler = WindowSampler(corpora, config.corpus_weights)
    evals = None
    if config.eval_every:
        source = eval_records if eval_records else [r for c in corpora for r in c]
        evals = eval_batches(source, config.seq_len, config.eval_windows, config.batch_size)

    while state.step < end:
        batch = sampler.batch(config.batch_size, config.seq_len, state.rng)
        lr = lr_at(state.step + 1, config)
        loss = mlm_step(batch, state, config, lr)
        row = {"step": state.step, "loss": loss, "lr": lr}
        if evals is not None and (state.step % config.eval_every == 0 or state.step == end):
            row["eval_ppl"] = eval_ppl(evals, state.params, state.model_config)
        if log_fn is not None:
            log_fn(row)
    return state


# ---------------------------------------------------------------------------
# checkpoint file


@dataclass
class Checkpoint:
    """Named float tensors plus JSON metadata."""

    tensors: dict
    meta: dict


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    """TDNA | u32 version | u64 header length | JSON header | f64 payloads | u32 CRC32."""
    manifest = []
    payload = bytearray()
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload),
                         "nbytes": arr.nbytes})
        payload += arr.tobytes()
    header = json.dumps({"meta": ckpt.meta, "tensors": manifest}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + bytes(payload)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def read_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a TDNA checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointIntegrityError(f"{path}: CRC32 mismatch (truncated or corrupted file)")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    start = 16
    if start + hlen > len(body):
        raise CheckpointIntegrityError(f"{path}: header extends past end of file")
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    payload = body[start + hlen :]
    tensors = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointIntegrityError(f"{path}: tensor {t['name']} extends past payload")
        arr = np.frombuffer(payload[t["offset"] : end], dtype="<f8").reshape(t["shape"])
        tensors[t["name"]] = arr.astype(np.float64)
    return Checkpoint(tensors, header["meta"])


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    tensors = {f"param/{p.name}": p.data for p in state.params}
    for name, m in state.opt.m.items():
        tensors[f"opt.m/{name}"] = m
        tensors[f"opt.v/{name}"] = state.opt.v[name]
    meta = {
        "kind": "pretrain",
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict() if state.train_config else None,
        "step": state.step,
        "opt_t": state.opt.t,
        "rng_state": state.rng.get_state(),
    }
    return Checkpoint(tensors, meta)


def checkpoint_to_state(ckpt: Checkpoint) -> TrainState:
    meta = ckpt.meta
    if meta.get("kind") not in (None, "pretrain"):
        raise ConfigError(f"expected a pre-training checkpoint, got kind {meta.get('kind')!r}")
    mcfg = ModelConfig.from_dict(meta["model_config"])
    params = ModelParams(Parameter(arr, name[len("param/"):])
                         for name, arr in ckpt.tensors.items() if name.startswith("param/"))
    check_params(params, mcfg)
    ordered = ModelParams(params[n] for n in param_shapes(mcfg))
    opt = AdamWState(t=int(meta.get("opt_t", 0)))
    for name, arr in ckpt.tensors.items():
        if name.startswith("opt.m/"):
            opt.m[name[6:]] = arr.copy()
        elif name.startswith("opt.v/"):
            opt.v[name[6:]] = arr.copy()
    rng = RandomSource(meta["rng_state"]["seed"])
    rng.set_state(meta["rng_state"])
    tcfg = TrainConfig.from_dict(meta["train_config"]) if meta.get("train_config") else None
    return TrainState(mcfg, ordered, opt, int(meta["step"]), rng, tcfg)


def save_checkpoint(state: TrainState, path) -> None:
    write_checkpoint(state_to_checkpoint(state), path)


def load_checkpoint(path) -> TrainState:
    return checkpoint_to_state(read_checkpoint(path))
