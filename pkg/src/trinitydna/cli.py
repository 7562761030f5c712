"""Command-line entry point: synth, pretrain, score, diagnose, cds."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .cds_bench import (
    FinetuneConfig, evaluate_cds, evaluate_intervals, finetune_cds,
    format_table, load_classifier, metrics_json, save_classifier,
)
from .evaluation import entropy_by_length, influence_by_distance, score_pair, score_record
from .genome_io import (
    GenerationError, ParseError, SyntheticGenomeSpec, generate_synthetic_corpus, parse_annotations,
    parse_fasta, serialize_annotations, validate_intervals, write_fasta,
)
from .numerics import ConfigError, ContractError, RandomSource, ShapeError
from .training import (
    CheckpointIntegrityError, CheckpointVersionError, NumericalError, TrainConfig,
    load_checkpoint, run_stage, save_checkpoint,
)

log = logging.getLogger("trinitydna")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "TRINITY_SEED"

USAGE_ERRORS = (ConfigError, ContractError, ShapeError, ParseError, GenerationError,
                CheckpointIntegrityError, CheckpointVersionError, OSError, json.JSONDecodeError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(extra: list[str]) -> dict:
    """``--key=value``, ``--key value`` and bare ``--flag`` (true) into a dict.

    Values are read as JSON when possible, else kept as strings; dashes in
    keys become underscores.
    """
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            value = _coerce(val)
        elif i + 1 < len(extra) and not extra[i + 1].startswith("--"):
            value = _coerce(extra[i + 1])
            i += 1
        else:
            value = True
        out[key.replace("-", "_")] = value
        i += 1
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    cfg.update(overrides)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cfg


def _split_fields(cfg: dict, cls) -> tuple[dict, dict]:
    known = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in known}, {k: v for k, v in cfg.items() if k not in known}


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_fasta(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse_fasta(fh)


def _read_annotations(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh)


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(value, what: str):
    if value in (None, "", []):
        raise UsageError(f"missing required input: {what}")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, extra: dict) -> int:
    cfg = load_config(args.config, extra)
    spec_args = {
        "total_length": args.length, "gene_count": args.genes, "seed": args.seed,
        "gene_length_range": (args.min_gene, args.max_gene), "strand_mix": args.strand_mix,
        "records": args.records,
    }
    spec_args = {k: v for k, v in spec_args.items() if v is not None}
    spec_args.update(cfg)
    if "gene_length_range" in spec_args:
        spec_args["gene_length_range"] = tuple(spec_args["gene_length_range"])
    if "codons" in spec_args:
        spec_args["codons"] = tuple(spec_args["codons"])
    known, unknown = _split_fields(spec_args, SyntheticGenomeSpec)
    if unknown:
        raise UsageError(f"unknown synth options: {sorted(unknown)}")
    if "total_length" not in known or "gene_count" not in known:
        raise UsageError("synth needs --length and --genes")
    spec = SyntheticGenomeSpec(**known)
    records, intervals = generate_synthetic_corpus(spec)
    out = _out_dir(args.out)
    with open(out / "corpus.fa", "w", encoding="utf-8", newline="\n") as fh:
        write_fasta(records, fh)
    (out / "annotations.tsv").write_text(serialize_annotations(intervals), encoding="utf-8")
    write_json(out / "config.json", asdict(spec))
    fwd = sum(iv.strand == "+" for iv in intervals)
    print(f"records={len(records)} bases={sum(len(r) for r in records)} "
          f"genes={len(intervals)} forward={fwd} reverse={len(intervals) - fwd}")
    return EXIT_OK


def cmd_pretrain(args, extra: dict) -> int:
    cfg = load_config(args.config, extra)
    for key in ("corpus", "eval_corpus"):
        if isinstance(cfg.get(key), str):
            cfg[key] = [cfg[key]]
    known, unknown = _split_fields(cfg, TrainConfig)
    if unknown:
        raise UsageError(f"unknown training options: {sorted(unknown)}")
    config = TrainConfig.from_dict(known)
    if config.peak_lr == 0:
        log.warning("peak_lr is 0: parameters will not change")
    initial = load_checkpoint(args.init) if args.init else None
    if config.stage == 2 and initial is None and not config.scratch:
        raise ConfigError("stage 2 needs --init CHECKPOINT (or --scratch for the ablation)")
    out = _out_dir(args.out)
    write_json(out / "config.json", config.to_dict())
    start = initial.step if (initial is not None and args.resume) else 0
    corpora = [] if config.steps <= start else None
    if corpora is None and not config.corpus:
        raise UsageError("pretrain needs --corpus FASTA (one or more)")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mfh:
        def log_row(row):
            mfh.write(json.dumps(row, sort_keys=True) + "\n")
        state = run_stage(config, initial, corpora=corpora, resume=args.resume, log_fn=log_row)
    save_checkpoint(state, out / "checkpoint.tdna")
    print(f"step={state.step} checkpoint={out / 'checkpoint.tdna'}")
    return EXIT_OK


def _pair_records(wt_records, mt_records):
    """Each mutant pairs with the wild type whose id is its longest prefix."""
    wt_ids = sorted((r.id for r in wt_records), key=len, reverse=True)
    by_id = {r.id: r for r in wt_records}
    pairs = []
    for mt in mt_records:
        match = next((w for w in wt_ids if mt.id.startswith(w)), None)
        if match is None:
            raise UsageError(f"mutant record {mt.id!r} has no wild-type record sharing its id prefix")
        pairs.append((by_id[match], mt))
    return pairs


def cmd_score(args, extra: dict) -> int:
    if extra:
        raise UsageError(f"unknown score options: {sorted(extra)}")
    state = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    records = _read_fasta(_require(args.fasta, "--fasta"))
    lines = []
    if args.mode == "ppl":
        for rec in records:
            rep = score_record(rec, state.params, state.model_config, groups=args.groups,
                               window=args.window, sequential=args.sequential)
            lines.append(rep.to_json())
    else:
        mutants = _read_fasta(_require(args.mutant, "--mutant"))
        for wt, mt in _pair_records(records, mutants):
            lines.append(score_pair(wt, mt, state.params, state.model_config, args.sequential).to_json())
    text = "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(args, extra: dict) -> int:
    cfg = load_config(None, extra)
    seed = int(cfg.pop("seed", args.seed))
    if cfg:
        raise UsageError(f"unknown diagnose options: {sorted(cfg)}")
    state = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    rows = ["seq_len,mean_entropy"] if args.kind == "entropy" else ["distance,mean_log10_influence"]
    if args.kind == "entropy":
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
        for n, ent in entropy_by_length(state.params, state.model_config, lengths, args.samples, seed):
            rows.append(f"{n},{ent:.12g}")
    else:
        ids = RandomSource(seed).integers(0, 4, size=args.length)
        for d, val in influence_by_distance(state.params, state.model_config, ids):
            rows.append(f"{d},{val:.12g}")
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_cds_train(args, extra: dict) -> int:
    cfg = load_config(args.config, extra)
    known, unknown = _split_fields(cfg, FinetuneConfig)
    if unknown:
        raise UsageError(f"unknown cds train options: {sorted(unknown)}")
    config = FinetuneConfig(**known)
    if config.lr == 0:
        log.warning("lr is 0: adapters and head will not change")
    base = load_checkpoint(_require(args.base, "--base"))
    records = _read_fasta(_require(args.fasta, "--fasta"))
    intervals = _read_annotations(_require(args.annotations, "--annotations"))
    validate_intervals(records, intervals)
    out = _out_dir(args.out)
    write_json(out / "config.json", asdict(config))
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as mfh:
        def log_row(row):
            mfh.write(json.dumps(row, sort_keys=True) + "\n")
        clf = finetune_cds(base, records, intervals, config, log_fn=log_row)
    save_classifier(clf, out / "classifier.tdna")
    print(f"step={clf.step} classifier={out / 'classifier.tdna'}")
    return EXIT_OK


def cmd_cds_eval(args, extra: dict) -> int:
    if extra:
        raise UsageError(f"unknown cds eval options: {sorted(extra)}")
    records = _read_fasta(_require(args.fasta, "--fasta"))
    truth = _read_annotations(_require(args.annotations, "--annotations"))
    validate_intervals(records, truth)
    if args.predictions:
        pred = _read_annotations(args.predictions)
        exact, s75 = evaluate_intervals(truth, pred)
        result = metrics_json(exact, s75)
    elif args.classifier:
        clf = load_classifier(args.classifier)
        ev = evaluate_cds(clf, records, truth, args.min_len, args.window, args.overlap,
                          args.switch_cost)
        exact, s75, pred = ev.exact, ev.seventy_five, ev.predictions
        result = ev.to_json()
    else:
        raise UsageError("cds eval needs --classifier CHECKPOINT or --predictions TSV")
    table = format_table(exact, s75)
    sys.stdout.write(table)
    if args.out:
        out = _out_dir(args.out)
        write_json(out / "metrics.json", result)
        (out / "table.txt").write_text(table, encoding="utf-8")
        (out / "predictions.tsv").write_text(serialize_annotations(sorted(pred)), encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trinitydna", description="DNA foundation model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic annotated genome")
    s.add_argument("--length", type=int)
    s.add_argument("--genes", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--min-gene", type=int, default=150)
    s.add_argument("--max-gene", type=int, default=600)
    s.add_argument("--strand-mix", type=float)
    s.add_argument("--records", type=int)
    s.add_argument("--config")
    s.add_argument("--out", default="synth_out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("pretrain", help="MLM pre-training (one stage)")
    t.add_argument("--config")
    t.add_argument("--init", help="checkpoint to start from")
    t.add_argument("--resume", action="store_true", help="continue the init checkpoint's run")
    t.add_argument("--out", default="pretrain_out")
    t.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("score", help="zero-shot pseudo-perplexity or mutation impact")
    c.add_argument("--checkpoint")
    c.add_argument("--fasta")
    c.add_argument("--mode", choices=("ppl", "impact"), default="ppl")
    c.add_argument("--mutant", help="mutant FASTA for impact mode")
    c.add_argument("--sequential", action="store_true")
    c.add_argument("--groups", type=int, default=7)
    c.add_argument("--window", type=int, default=512)
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)

    d = sub.add_parser("diagnose", help="attention entropy or influence CSV")
    d.add_argument("--checkpoint")
    d.add_argument("--kind", choices=("entropy", "influence"), required=True)
    d.add_argument("--lengths", default="64,128,256,512")
    d.add_argument("--samples", type=int, default=4)
    d.add_argument("--length", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("cds", help="coding-sequence benchmark")
    bsub = b.add_subparsers(dest="cds_command", required=True)
    bt = bsub.add_parser("train", help="LoRA fine-tune a token classifier")
    bt.add_argument("--config")
    bt.add_argument("--base")
    bt.add_argument("--fasta")
    bt.add_argument("--annotations")
    bt.add_argument("--out", default="cds_out")
    bt.set_defaults(func=cmd_cds_train)
    be = bsub.add_parser("eval", help="Exact / 75% match metrics")
    be.add_argument("--classifier")
    be.add_argument("--predictions", help="annotation TSV of gene calls to score instead")
    be.add_argument("--fasta")
    be.add_argument("--annotations")
    be.add_argument("--min-len", type=int, default=60)
    be.add_argument("--window", type=int)
    be.add_argument("--overlap", type=int)
    be.add_argument("--switch-cost", type=float,
                    help="decoder penalty per label change; default from the classifier, 0 = argmax")
    be.add_argument("--out")
    be.set_defaults(func=cmd_cds_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        extra = parse_overrides(rest)
        return args.func(args, extra)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
