"""Coding-sequence annotation benchmark: token labels, LoRA fine-tuning,
interval decoding and Exact / 75% match metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numerics as nx
from .genome_io import FORWARD, REVERSE, AnnotationInterval, DnaRecord
from .model import (
    ModelConfig, ModelParams, attention_paths, check_params, hidden_states, lora_attach,
)
from .numerics import ConfigError, ContractError, Parameter, ParamStore, RandomSource, Tensor
from .tokenizer import PAD, encode
from .training import (
    AdamWState, Checkpoint, NumericalError, TrainState, adamw_update, clip_grad_norm, read_checkpoint,
    write_checkpoint,
)

NONCODING, CDS_FORWARD, CDS_REVERSE = 0, 1, 2
N_CLASSES = 3
IGNORE = -1

EXACT = "exact"
SEVENTY_FIVE = "seventy_five"
CRITERIA = (EXACT, SEVENTY_FIVE)

HEAD_WIDTHS = (256, 128)

_STRAND_LABEL = {FORWARD: CDS_FORWARD, REVERSE: CDS_REVERSE}
_LABEL_STRAND = {CDS_FORWARD: FORWARD, CDS_REVERSE: REVERSE}


# ---------------------------------------------------------------------------
# labels <-> intervals


def labels_from_annotations(record: DnaRecord | int, intervals: Iterable[AnnotationInterval]) -> np.ndarray:
    """Per-token labels; where genes overlap, the earliest-starting one wins.

    Ties on start go to the longer interval, then to the forward strand.
    Given a record, intervals on other sequences are ignored.
    """
    if isinstance(record, int):
        n = record
    else:
        n = len(record.bases)
        intervals = [iv for iv in intervals if iv.seq_id == record.id]
    labels = np.zeros(n, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    order = sorted(intervals, key=lambda iv: (iv.start, -(iv.end - iv.start), iv.strand != FORWARD))
    for iv in order:
        if iv.start < 0 or iv.end > n or iv.start >= iv.end:
            raise ContractError(f"interval [{iv.start},{iv.end}) outside record of length {n}")
        free = ~taken[iv.start : iv.end]
        labels[iv.start : iv.end][free] = _STRAND_LABEL[iv.strand]
        taken[iv.start : iv.end] = True
    return labels


def intervals_from_labels(labels, seq_id: str = "seq", min_len: int = 60) -> list[AnnotationInterval]:
    """Maximal runs of one coding label, keeping runs of length >= min_len."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [labels.size]])
    out = []
    for s, e in zip(starts, ends):
        lab = int(labels[s])
        if lab in _LABEL_STRAND and e - s >= min_len:
            out.append(AnnotationInterval(seq_id, int(s), int(e), _LABEL_STRAND[lab]))
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MatchReport:
    criterion: str
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    f1: float
    undefined: list = field(default_factory=list)

    @classmethod
    def from_counts(cls, criterion: str, tp: int, fp: int, fn: int) -> "MatchReport":
        undefined = []
        if tp + fn:
            recall = tp / (tp + fn)
        else:
            recall = 0.0
            undefined.append("recall")
        if tp + fp:
            precision = tp / (tp + fp)
        else:
            precision = 0.0
            undefined.append("precision")
        if recall + precision > 0:
            f1 = 2 * recall * precision / (recall + precision)
        else:
            f1 = 0.0
            undefined.append("f1")
        return cls(criterion, tp, fp, fn, recall, precision, f1, undefined)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "recall": self.recall,
                "precision": self.precision, "f1": self.f1, "undefined": list(self.undefined)}


def satisfies(truth: AnnotationInterval, pred: AnnotationInterval, criterion: str) -> bool:
    """Exact: identical coordinates and strand.  75%: prediction inside the
    truth, at least 75% of its length, same strand."""
    if truth.seq_id != pred.seq_id or truth.strand != pred.strand:
        return False
    if criterion == EXACT:
        return truth.start == pred.start and truth.end == pred.end
    if criterion == SEVENTY_FIVE:
        inside = pred.start >= truth.start and pred.end <= truth.end
        return inside and 4 * (pred.end - pred.start) >= 3 * (truth.end - truth.start)
    raise ConfigError(f"unknown criterion {criterion!r}")


def _overlap(a: AnnotationInterval, b: AnnotationInterval) -> int:
    return max(0, min(a.end, b.end) - max(a.start, b.start))


def _matched_pairs(truth: Sequence[AnnotationInterval], pred: Sequence[AnnotationInterval],
                   criterion: str, strategy: str) -> int:
    if not truth or not pred:
        return 0
    ok = np.array([[satisfies(t, p, criterion) for p in pred] for t in truth], dtype=bool)
    if not ok.any():
        return 0
    if strategy == "greedy":
        cand = sorted(((-_overlap(truth[i], pred[j]), i, j) for i, j in zip(*np.nonzero(ok))))
        used_t, used_p = set(), set()
        for _, i, j in cand:
            if i not in used_t and j not in used_p:
                used_t.add(i)
                used_p.add(j)
        return len(used_t)
    # maximum-cardinality one-to-one matching of criterion-satisfying pairs
    rows = np.flatnonzero(ok.any(axis=1))
    cols = np.flatnonzero(ok.any(axis=0))
    sub = ok[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(-sub.astype(np.float64))
    return int(sub[r, c].sum())


def match_predictions(truth: Sequence[AnnotationInterval], pred: Sequence[AnnotationInterval],
                      criterion: str, strategy: str = "optimal") -> MatchReport:
    """One-to-one matching of predictions to truths under ``criterion``.

    ``optimal`` maximizes the number of matched pairs; ``greedy`` takes
    qualifying pairs by descending overlap.
    """
    if criterion not in CRITERIA:
        raise ConfigError(f"unknown criterion {criterion!r}")
    if strategy not in ("optimal", "greedy"):
        raise ConfigError(f"unknown matching strategy {strategy!r}")
    by_t: dict[str, list] = {}
    by_p: dict[str, list] = {}
    for t in truth:
        by_t.setdefault(t.seq_id, []).append(t)
    for p in pred:
        by_p.setdefault(p.seq_id, []).append(p)
    tp = sum(_matched_pairs(sorted(by_t.get(k, [])), sorted(by_p.get(k, [])), criterion, strategy)
             for k in set(by_t) | set(by_p))
    return MatchReport.from_counts(criterion, tp, len(pred) - tp, len(truth) - tp)


def match_both(truth, pred) -> tuple[MatchReport, MatchReport]:
    return match_predictions(truth, pred, EXACT), match_predictions(truth, pred, SEVENTY_FIVE)


def metrics_json(exact: MatchReport, seventy_five: MatchReport) -> dict:
    return {EXACT: exact.to_dict(), SEVENTY_FIVE: seventy_five.to_dict()}


def format_table(exact: MatchReport, seventy_five: MatchReport) -> str:
    """Fixed-width Recall / Precision / F1 table; '*' marks undefined values reported as 0."""
    keys = ("recall", "precision", "f1")

    def cells(r: MatchReport) -> str:
        return "".join(f"{getattr(r, k):10.4f}{'*' if k in r.undefined else ' '}" for k in keys)

    head = f"{'':6}{'Exact Match':^33}  {'75% Match':^33}"
    sub = f"{'':6}" + "  ".join(["".join(f"{n:>10} " for n in ("Recall", "Precision", "F1"))] * 2)
    row = f"{'CDS':6}{cells(exact)}  {cells(seventy_five)}"
    return "\n".join(line.rstrip() for line in (head, sub, row)) + "\n"


# ---------------------------------------------------------------------------
# classifier


def init_head(hidden: int, rng: RandomSource) -> ParamStore:
    """H -> 256 -> 128 -> 3 MLP weights, N(0, 1/fan_in) init and zero biases."""
    dims = (hidden,) + HEAD_WIDTHS + (N_CLASSES,)
    names = ("fc1", "fc2", "out")
    store = ParamStore()
    for name, d_in, d_out in zip(names, dims[:-1], dims[1:]):
        store.add(Parameter(rng.normal((d_in, d_out), 1.0 / math.sqrt(d_in)), f"cls.{name}.weight"))
        store.add(Parameter(np.zeros(d_out), f"cls.{name}.bias"))
    return store


def head_forward(h: Tensor, head: ParamStore) -> Tensor:
    x = nx.gelu(nx.add(nx.matmul(h, head["cls.fc1.weight"]), head["cls.fc1.bias"]))
    x = nx.gelu(nx.add(nx.matmul(x, head["cls.fc2.weight"]), head["cls.fc2.bias"]))
    return nx.add(nx.matmul(x, head["cls.out.weight"]), head["cls.out.bias"])


@dataclass
class CdsClassifier:
    model_config: ModelConfig
    params: ModelParams       # frozen base weights + LoRA adapters
    head: ParamStore
    lora_r: int
    lora_alpha: float
    seq_len: int
    step: int = 0
    switch_cost: float = 0.0  # decoder penalty per label change (nats); 0 = plain argmax

    def trainable(self) -> list[Parameter]:
        return self.params.adapter_params() + list(self.head)

    def logits(self, ids: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        return head_forward(hidden_states(ids, self.params, self.model_config, pad_mask), self.head)


@dataclass
class FinetuneConfig:
    steps: int = 2000
    seq_len: int = 256
    batch_size: int = 32
    lr: float = 1e-3
    lora_r: int = 4
    lora_alpha: float = 32.0
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 1 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("seq_len and batch_size must be >= 1, steps >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.lora_r < 1:
            raise ConfigError("LoRA rank must be >= 1")


def build_classifier(base: TrainState, config: FinetuneConfig) -> CdsClassifier:
    """Fresh classifier on a copy of the base weights (base state is not touched)."""
    check_params(base.params, base.model_config)
    rng = RandomSource(config.seed).spawn(3)
    params = base.params.copy()
    params.set_trainable(False)
    for path in attention_paths(base.model_config):
        lora_attach(params, path, config.lora_r, config.lora_alpha, rng)
    head = init_head(base.model_config.hidden, rng)
    return CdsClassifier(base.model_config, params, head, config.lora_r, config.lora_alpha,
                         config.seq_len)


class LabeledWindowSampler:
    """Uniform random windows over labeled records (length-weighted record choice)."""

    def __init__(self, records: Sequence[DnaRecord], labels: Sequence[np.ndarray]):
        if not records:
            raise ContractError("no labeled records to sample from")
        self.ids = [encode(r.bases).ids for r in records]
        self.labels = [np.asarray(l) for l in labels]
        lengths = np.array([len(i) for i in self.ids], dtype=np.float64)
        self.weights = lengths / lengths.sum()

    def batch(self, batch_size: int, length: int, rng: RandomSource):
        ids = np.full((batch_size, length), PAD, dtype=np.int64)
        tgt = np.full((batch_size, length), IGNORE, dtype=np.int64)
        which = rng.gen.choice(len(self.ids), size=batch_size, p=self.weights)
        for row, k in enumerate(which):
            seq, lab = self.ids[k], self.labels[k]
            start = int(rng.integers(0, max(1, len(seq) - length + 1)))
            chunk = seq[start : start + length]
            ids[row, : len(chunk)] = chunk
            tgt[row, : len(chunk)] = lab[start : start + length]
        return ids, tgt


def classifier_loss(clf: CdsClassifier, ids: np.ndarray, targets: np.ndarray) -> Tensor:
    pad = ids == PAD
    logits = clf.logits(ids, pad)
    selected = targets != IGNORE
    return nx.cross_entropy_masked(logits, np.where(selected, targets, 0), selected)


def finetune_cds(base: TrainState, records: Sequence[DnaRecord],
                 intervals: Sequence[AnnotationInterval], config: FinetuneConfig,
                 log_fn: Callable[[dict], None] | None = None,
                 classifier: CdsClassifier | None = None) -> CdsClassifier:
    """Train LoRA adapters on every attention projection plus the classifier
    head with per-token cross-entropy; base weights stay frozen."""
    clf = classifier if classifier is not None else build_classifier(base, config)
    by_id: dict[str, list] = {}
    for iv in intervals:
        by_id.setdefault(iv.seq_id, []).append(iv)
    known = {r.id for r in records}
    stray = set(by_id) - known
    if stray:
        raise ContractError(f"annotations reference unknown records: {sorted(stray)[:3]}")
    labels = [labels_from_annotations(r, by_id.get(r.id, [])) for r in records]
    clf.switch_cost = math.log(mean_run_length(labels))
    sampler = LabeledWindowSampler(records, labels)
    rng = RandomSource(config.seed).spawn(4)
    opt = AdamWState()
    trainable = clf.trainable()
    for p in trainable:
        p.requires_grad = True
    while clf.step < config.steps:
        ids, tgt = sampler.batch(config.batch_size, config.seq_len, rng)
        for p in trainable:
            p.zero_grad()
        loss = classifier_loss(clf, ids, tgt)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite fine-tuning loss at step {clf.step}")
        nx.backward(loss)
        if config.clip_norm is not None:
            clip_grad_norm(trainable, config.clip_norm)
        adamw_update(trainable, opt, config.lr, config.weight_decay)
        clf.step += 1
        if log_fn is not None:
            log_fn({"step": clf.step, "loss": value, "lr": config.lr})
    return clf


# ---------------------------------------------------------------------------
# prediction and evaluation


def _window_starts(n: int, window: int, overlap: int) -> list[int]:
    if n <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


INFER_WINDOW_FACTOR = 4


def predict_probs(clf: CdsClassifier, record: DnaRecord, window: int | None = None,
                  overlap: int | None = None, batch_size: int = 8) -> np.ndarray:
    """(L, 3) class probabilities; overlapping windows are averaged.

    Defaults: windows of 4x the fine-tune length, overlapping by half, so every
    interior token is seen twice, once with a quarter window of context or more
    on both sides.
    """
    window = window or INFER_WINDOW_FACTOR * clf.seq_len
    overlap = window // 2 if overlap is None else overlap
    if not 0 <= overlap < window:
        raise ConfigError("overlap must lie in [0, window)")
    ids = encode(record.bases).ids
    n = len(ids)
    total = np.zeros((n, N_CLASSES))
    votes = np.zeros(n)
    starts = _window_starts(n, window, overlap)
    with nx.no_grad():
        for lo in range(0, len(starts), batch_size):
            chunk = starts[lo : lo + batch_size]
            width = min(window, n)
            batch = np.stack([ids[s : s + width] for s in chunk])
            logits = clf.logits(batch).data
            probs = np.exp(nx.log_softmax_np(logits))
            for s, pr in zip(chunk, probs):
                total[s : s + width] += pr
                votes[s : s + width] += 1
    return total / votes[:, None]


def mean_run_length(labels: Sequence[np.ndarray]) -> float:
    """Mean length of maximal constant-label runs, pooled over records."""
    runs = total = 0
    for lab in labels:
        lab = np.asarray(lab)
        if lab.size:
            runs += 1 + int(np.count_nonzero(np.diff(lab)))
            total += lab.size
    return total / runs if runs else 1.0


def segment_labels(probs: np.ndarray, switch_cost: float) -> np.ndarray:
    """Most probable label path under per-token log-probabilities minus
    ``switch_cost`` per label change (Viterbi). A zero cost is plain argmax."""
    logp = np.log(np.maximum(probs, 1e-300))
    n, k = logp.shape
    if n == 0 or switch_cost <= 0:
        return logp.argmax(axis=-1)
    back = np.zeros((n, k), dtype=np.int64)
    score = logp[0].copy()
    stay = np.arange(k)
    for t in range(1, n):
        best = int(score.argmax())
        switch = score[best] - switch_cost
        keep = score >= switch
        back[t] = np.where(keep, stay, best)
        score = np.where(keep, score, switch) + logp[t]
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(score.argmax())
    for t in range(n - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def predict_labels(clf: CdsClassifier, record: DnaRecord, window: int | None = None,
                   overlap: int | None = None, switch_cost: float | None = None) -> np.ndarray:
    """Per-token labels decoded from the stitched probabilities.

    ``switch_cost`` defaults to the classifier's own, ln(mean label-run length
    of its training annotations): a change-point prior of one per typical run.
    """
    cost = clf.switch_cost if switch_cost is None else switch_cost
    return segment_labels(predict_probs(clf, record, window, overlap), cost)


@dataclass
class CdsEvaluation:
    exact: MatchReport
    seventy_five: MatchReport
    predictions: list
    token_accuracy: float

    def to_json(self) -> dict:
        out = metrics_json(self.exact, self.seventy_five)
        out["token_accuracy"] = self.token_accuracy
        return out


def evaluate_labels(records: Sequence[DnaRecord], truth: Sequence[AnnotationInterval],
                    predicted_labels: Sequence[np.ndarray], min_len: int = 60) -> CdsEvaluation:
    """Score per-record predicted labels against ground-truth intervals."""
    by_id: dict[str, list] = {}
    for iv in truth:
        by_id.setdefault(iv.seq_id, []).append(iv)
    preds = []
    correct = total = 0
    for rec, lab in zip(records, predicted_labels):
        lab = np.asarray(lab)
        true_lab = labels_from_annotations(rec, by_id.get(rec.id, []))
        correct += int((lab == true_lab).sum())
        total += len(true_lab)
        preds.extend(intervals_from_labels(lab, rec.id, min_len))
    exact, s75 = match_both(list(truth), preds)
    return CdsEvaluation(exact, s75, preds, correct / total if total else 0.0)


def evaluate_cds(clf: CdsClassifier, records: Sequence[DnaRecord],
                 truth: Sequence[AnnotationInterval], min_len: int = 60,
                 window: int | None = None, overlap: int | None = None,
                 switch_cost: float | None = None) -> CdsEvaluation:
    labels = [predict_labels(clf, r, window, overlap, switch_cost) for r in records]
    return evaluate_labels(records, truth, labels, min_len)


def evaluate_intervals(truth: Sequence[AnnotationInterval],
                       pred: Sequence[AnnotationInterval]) -> tuple[MatchReport, MatchReport]:
    """Metrics for an externally produced set of gene calls."""
    return match_both(list(truth), list(pred))


# ---------------------------------------------------------------------------
# classifier checkpoint


def classifier_to_checkpoint(clf: CdsClassifier) -> Checkpoint:
    tensors = {f"param/{p.name}": p.data for p in clf.params}
    for path, ad in clf.params.adapters.items():
        tensors[f"lora.a/{path}"] = ad.a.data
        tensors[f"lora.b/{path}"] = ad.b.data
    for p in clf.head:
        tensors[f"head/{p.name}"] = p.data
    meta = {
        "kind": "classifier",
        "model_config": clf.model_config.to_dict(),
        "lora_r": clf.lora_r,
        "lora_alpha": clf.lora_alpha,
        "seq_len": clf.seq_len,
        "step": clf.step,
        "switch_cost": clf.switch_cost,
    }
    return Checkpoint(tensors, meta)


def save_classifier(clf: CdsClassifier, path) -> None:
    write_checkpoint(classifier_to_checkpoint(clf), path)


def load_classifier(path) -> CdsClassifier:
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "classifier":
        raise ConfigError(f"{path}: expected a classifier checkpoint, got kind {meta.get('kind')!r}")
    mcfg = ModelConfig.from_dict(meta["model_config"])
    params = ModelParams(Parameter(a, n[len("param/"):], requires_grad=False)
                         for n, a in ckpt.tensors.items() if n.startswith("param/"))
    check_params(params, mcfg)
    r, alpha = int(meta["lora_r"]), float(meta["lora_alpha"])
    for path_ in attention_paths(mcfg):
        try:
            a, b = ckpt.tensors[f"lora.a/{path_}"], ckpt.tensors[f"lora.b/{path_}"]
        except KeyError:
            raise ConfigError(f"classifier checkpoint lacks adapter for {path_}") from None
        ad = lora_attach(params, path_, r, alpha, RandomSource(0))
        ad.a.data[...] = a
        ad.b.data[...] = b
    head = ParamStore()
    for name in ("fc1", "fc2", "out"):
        for part in ("weight", "bias"):
            key = f"head/cls.{name}.{part}"
            if key not in ckpt.tensors:
                raise ConfigError(f"classifier checkpoint lacks {key}")
            head.add(Parameter(ckpt.tensors[key], f"cls.{name}.{part}"))
    if head["cls.fc1.weight"].shape[0] != mcfg.hidden:
        raise ConfigError("classifier head width does not match the base hidden size")
    return CdsClassifier(mcfg, params, head, r, alpha, int(meta["seq_len"]), int(meta.get("step", 0)),
                         float(meta.get("switch_cost", 0.0)))
