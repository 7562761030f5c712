"""DNA records, annotation intervals, reverse complement and synthetic genomes."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .numerics import ContractError, RandomSource

log = logging.getLogger(__name__)

ALPHABET = "ACGTN"
_COMPLEMENT = str.maketrans("ACGTN", "TGCAN")
_VALID = frozenset(ALPHABET)

FORWARD = "+"
REVERSE = "-"
_STRAND_SYMBOLS = {"+": FORWARD, "-": REVERSE, "−": REVERSE}

# 9-base start and 6-base stop signals planted at gene 5' and 3' ends.
START_MOTIF = "ATGGCTAAG"
STOP_MOTIF = "TAATGA"

# Codons used for synthetic gene bodies; no stop codons and not closed under
# reverse complement, so body composition reveals the coding strand.
BODY_CODONS = (
    "GCT", "GCC", "GAA", "GAG", "AAA", "AAG", "CTG", "GGC",
    "ATG", "GAT", "CGT", "ACC", "CAG", "GTG", "ATC", "TTC",
)


class ParseError(ValueError):
    """Malformed sequence or annotation input."""

    def __init__(self, message: str, line: int | None = None, position: int | None = None):
        self.line = line
        self.position = position
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"position {position}")
        super().__init__(message + (", " + ", ".join(where) if where else ""))


class GenerationError(RuntimeError):
    """Synthetic corpus constraints cannot be satisfied."""


@dataclass(frozen=True)
class DnaRecord:
    id: str
    bases: str

    def __post_init__(self):
        if not self.id:
            raise ParseError("record id must be non-empty")
        bad = _first_invalid(self.bases)
        if bad is not None:
            raise ParseError(f"invalid base {self.bases[bad]!r}", position=bad)

    def __len__(self) -> int:
        return len(self.bases)


@dataclass(frozen=True, order=True)
class AnnotationInterval:
    """0-based half-open interval [start, end) on a strand."""

    seq_id: str
    start: int
    end: int
    strand: str = FORWARD

    def __post_init__(self):
        if self.strand not in (FORWARD, REVERSE):
            raise ParseError(f"unknown strand {self.strand!r}")
        if not 0 <= self.start < self.end:
            raise ParseError(f"empty or negative interval [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


def _first_invalid(s: str) -> int | None:
    for i, ch in enumerate(s):
        if ch not in _VALID:
            return i
    return None


def reverse_complement(bases: str) -> str:
    """(s_N^C, ..., s_1^C) with A<->T, C<->G, N<->N."""
    bad = _first_invalid(bases)
    if bad is not None:
        raise ParseError(f"invalid base {bases[bad]!r}", position=bad)
    return bases.translate(_COMPLEMENT)[::-1]


def _open_text(stream) -> TextIO:
    if isinstance(stream, str):
        return io.StringIO(stream)
    return stream


def parse_fasta(stream) -> list[DnaRecord]:
    """Parse FASTA text (a string or a text stream).

    Lowercase bases are uppercased; any other character outside ACGTN is
    replaced by N and counted in a warning.
    """
    fh = _open_text(stream)
    records: list[DnaRecord] = []
    header = None
    chunks: list[str] = []
    replaced = 0
    seen_ids: set[str] = set()

    def flush():
        if header is None:
            return
        if header in seen_ids:
            raise ParseError(f"duplicate record id {header!r}")
        seen_ids.add(header)
        records.append(DnaRecord(header, "".join(chunks)))

    for lineno, raw in enumerate(fh, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            parts = line[1:].split()
            if not parts:
                raise ParseError("empty FASTA header", line=lineno)
            header = parts[0]
            chunks = []
            continue
        if header is None:
            raise ParseError("sequence data before first header", line=lineno)
        seq = "".join(line.split()).upper()
        if _first_invalid(seq) is not None:
            clean = []
            for ch in seq:
                if ch in _VALID:
                    clean.append(ch)
                else:
                    clean.append("N")
                    replaced += 1
            seq = "".join(clean)
        chunks.append(seq)
    flush()
    if replaced:
        log.warning("parse_fasta: replaced %d invalid character(s) with N", replaced)
    parse_fasta.last_replacements = replaced
    return records


parse_fasta.last_replacements = 0


def write_fasta(records: Iterable[DnaRecord], fh: TextIO, width: int = 80) -> None:
    for rec in records:
        fh.write(f">{rec.id}\n")
        for i in range(0, len(rec.bases), width):
            fh.write(rec.bases[i : i + width] + "\n")


def parse_annotations(stream) -> list[AnnotationInterval]:
    """Parse ``seq_id<TAB>start<TAB>end<TAB>strand`` lines, sorted by (seq_id, start)."""
    fh = _open_text(stream)
    out = []
    for lineno, raw in enumerate(fh, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise ParseError(f"expected 4 tab-separated columns, got {len(cols)}", line=lineno)
        seq_id, start_s, end_s, strand_s = (c.strip() for c in cols)
        try:
            start, end = int(start_s), int(end_s)
        except ValueError:
            raise ParseError("non-integer coordinate", line=lineno) from None
        if strand_s not in _STRAND_SYMBOLS:
            raise ParseError(f"unknown strand symbol {strand_s!r}", line=lineno)
        if start < 0 or start >= end:
            raise ParseError("empty interval", line=lineno)
        if not seq_id:
            raise ParseError("empty seq_id", line=lineno)
        out.append(AnnotationInterval(seq_id, start, end, _STRAND_SYMBOLS[strand_s]))
    out.sort(key=lambda iv: (iv.seq_id, iv.start, iv.end, iv.strand))
    return out


def serialize_annotations(intervals: Iterable[AnnotationInterval]) -> str:
    lines = [f"{iv.seq_id}\t{iv.start}\t{iv.end}\t{iv.strand}\n" for iv in intervals]
    return "".join(lines)


def validate_intervals(records: Iterable[DnaRecord], intervals: Iterable[AnnotationInterval]) -> None:
    lengths = {r.id: len(r) for r in records}
    for iv in intervals:
        if iv.seq_id not in lengths:
            raise ContractError(f"interval references unknown record {iv.seq_id!r}")
        if iv.end > lengths[iv.seq_id]:
            raise ContractError(
                f"interval [{iv.start}, {iv.end}) exceeds record {iv.seq_id!r} of length {lengths[iv.seq_id]}"
            )


@dataclass(frozen=True)
class Window:
    bases: str
    start: int
    pad_len: int


def sample_window(record: DnaRecord, length: int, rng: RandomSource) -> Window:
    """Uniform random window of ``length`` bases; short records are right-padded with N."""
    if length < 1:
        raise ContractError("window length must be >= 1")
    n = len(record)
    if n >= length:
        start = int(rng.integers(0, n - length + 1))
        return Window(record.bases[start : start + length], start, 0)
    pad = length - n
    return Window(record.bases + "N" * pad, 0, pad)


def tile_windows(record: DnaRecord, length: int) -> list[Window]:
    """Non-overlapping windows covering the record (last one padded)."""
    out = []
    for start in range(0, len(record), length):
        chunk = record.bases[start : start + length]
        out.append(Window(chunk + "N" * (length - len(chunk)), start, length - len(chunk)))
    return out


@dataclass
class SyntheticGenomeSpec:
    total_length: int
    gene_count: int
    gene_length_range: tuple[int, int] = (150, 600)
    strand_mix: float = 0.5
    start_motif: str = START_MOTIF
    stop_motif: str = STOP_MOTIF
    seed: int = 0
    records: int = 1
    id_prefix: str = "synth"
    body: str = "codon"
    gc_content: float = 0.5
    min_gap: int = 30
    max_retries: int = 1000
    codons: tuple[str, ...] = field(default=BODY_CODONS)


def _background(rng: np.random.Generator, n: int, gc: float) -> np.ndarray:
    at = (1.0 - gc) / 2.0
    cg = gc / 2.0
    return rng.choice(4, size=n, p=[at, cg, cg, at])


def _gene_bases(rng: np.random.Generator, length: int, spec: SyntheticGenomeSpec) -> str:
    body_len = length - len(spec.start_motif) - len(spec.stop_motif)
    if spec.body == "codon":
        n_codons = -(-body_len // 3)
        idx = rng.integers(0, len(spec.codons), size=n_codons)
        body = "".join(spec.codons[i] for i in idx)[:body_len]
    elif spec.body == "uniform":
        body = "".join(ALPHABET[i] for i in rng.integers(0, 4, size=body_len))
    else:
        raise GenerationError(f"unknown gene body model {spec.body!r}")
    return spec.start_motif + body + spec.stop_motif


def generate_synthetic_corpus(spec: SyntheticGenomeSpec) -> tuple[list[DnaRecord], list[AnnotationInterval]]:
    """Random genomes with planted, non-overlapping genes.

    Background bases are i.i.d. Genes are written 5'->3' on their strand, so a
    reverse-strand gene appears in the record as the reverse complement of
    start motif + body + stop motif. Genes are spread across ``spec.records``
    records of ``total_length // records`` bases each.
    """
    lo, hi = spec.gene_length_range
    min_gene = len(spec.start_motif) + len(spec.stop_motif)
    if lo < min_gene or hi < lo:
        raise GenerationError(f"gene length range {spec.gene_length_range} too short for motifs")
    if spec.records < 1 or spec.total_length < spec.records:
        raise GenerationError("need at least one base per record")
    if not 0.0 <= spec.strand_mix <= 1.0:
        raise GenerationError("strand_mix must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    rec_len = spec.total_length // spec.records
    per_record = [spec.gene_count // spec.records + (1 if r < spec.gene_count % spec.records else 0)
                  for r in range(spec.records)]

    records, intervals = [], []
    for r in range(spec.records):
        rid = f"{spec.id_prefix}_{r}" if spec.records > 1 else spec.id_prefix
        for _ in range(spec.max_retries):
            lengths = rng.integers(lo, hi + 1, size=per_record[r])
            if lengths.sum() + spec.min_gap * max(len(lengths) - 1, 0) <= rec_len:
                break
        else:
            raise GenerationError(
                f"cannot pack {per_record[r]} genes of length {lo}-{hi} into {rec_len} bases "
                f"after {spec.max_retries} retries"
            )
        # random gap composition: sorted cut points over the free space
        free = rec_len - int(lengths.sum()) - spec.min_gap * max(len(lengths) - 1, 0)
        cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
        starts = (cuts + np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
                  + spec.min_gap * np.arange(len(lengths)))
        bg = _background(rng, rec_len, spec.gc_content)
        seq = list("".join(ALPHABET[i] for i in bg))
        for s, ln in zip(starts, lengths):
            s, ln = int(s), int(ln)
            strand = REVERSE if rng.random() < spec.strand_mix else FORWARD
            gene = _gene_bases(rng, ln, spec)
            if strand == REVERSE:
                gene = reverse_complement(gene)
            seq[s : s + ln] = gene
            intervals.append(AnnotationInterval(rid, s, s + ln, strand))
        records.append(DnaRecord(rid, "".join(seq)))
    intervals.sort(key=lambda iv: (iv.seq_id, iv.start))
    return records, intervals


def motif_mask(record: DnaRecord, intervals: Iterable[AnnotationInterval],
               start_len: int = len(START_MOTIF), stop_len: int = len(STOP_MOTIF)) -> np.ndarray:
    """Boolean mask of positions covered by planted start/stop signals."""
    mask = np.zeros(len(record), dtype=bool)
    for iv in intervals:
        if iv.seq_id != record.id:
            continue
        if iv.strand == FORWARD:
            mask[iv.start : iv.start + start_len] = True
            mask[iv.end - stop_len : iv.end] = True
        else:
            mask[iv.end - start_len : iv.end] = True
            mask[iv.start : iv.start + stop_len] = True
    return mask
