"""Command-line entry point orchestrating the pipeline.

Every subcommand writes its artifact(s) and prints one single-line JSON
summary to stdout. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bpe, corpus, metrics, mining, scaling, shards
from .config import ENV_CONFIG_PATH, PipelineConfig, load_config, validate
from .dump_ingest import (
    TABLE_COMMENTS,
    TABLE_HISTORY,
    TABLE_POSTS,
    parse_comment,
    parse_history,
    parse_post,
    stream_rows,
)
from .errors import PipelineError, RowError, UsageError
from .mlm import (
    EncoderConfig,
    HeadKind,
    attach_head,
    build_encoder,
    finetune,
    load_checkpoint,
    plan_batches,
    save_checkpoint,
    train_mlm,
)
from .record_store import RecordStore, build_store

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on bad usage; we reserve 2 for data
    errors, so route usage problems through UsageError instead."""

    def error(self, message: str):
        raise UsageError(message)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, separators=(",", ":")))


def _parse_rows(path: str, table: str, parse_fn, skipped: list):
    with open(path, "rb") as fh:
        for attrs in stream_rows(fh, table):
            try:
                yield parse_fn(attrs)
            except RowError as exc:
                skipped.append((table, exc.row_id, str(exc)))
                logger.warning("skipping %s row: %s", table, exc)


# -- subcommand implementations -------------------------------------------------


def cmd_ingest(args, config: PipelineConfig) -> dict:
    posts = args.posts or config.posts
    comments = args.comments or config.comments
    history = args.posthistory or config.posthistory
    store_dir = args.store_dir or config.store_dir
    if not posts or not comments or not store_dir:
        raise UsageError("ingest requires --posts, --comments and --store-dir (or config [paths])")
    skipped: list = []
    post_iter = _parse_rows(posts, TABLE_POSTS, parse_post, skipped)
    comment_iter = _parse_rows(comments, TABLE_COMMENTS, parse_comment, skipped)
    if history:
        history_iter = _parse_rows(history, TABLE_HISTORY, parse_history, skipped)
    else:
        history_iter = iter(())
    store = build_store(post_iter, comment_iter, history_iter, store_dir)
    report = store.load_report
    report.skipped.extend(skipped)
    (Path(store_dir) / "load_report.txt").write_text(report.to_text())
    store.close()
    return {
        "store_dir": str(store_dir),
        "posts": report.n_posts,
        "comments": report.n_comments,
        "history": report.n_history,
        "skipped": len(report.skipped),
        "dangling_comments": len(report.dangling_comment_ids),
        "dangling_history": len(report.dangling_history_ids),
    }


def cmd_build_corpus(args, config: PipelineConfig) -> dict:
    store_dir = args.store_dir or config.store_dir
    out = args.out or (config.shards if args.format == "shards" else config.corpus)
    if not store_dir or not out:
        raise UsageError("build-corpus requires --store-dir and --out")
    tokenizer = None
    if args.format == "shards":
        vocab_path = args.vocab or config.vocab
        if not vocab_path:
            raise UsageError("shard output requires --vocab")
        tokenizer = bpe.load_vocab(vocab_path)
    counters: dict = {"skipped_empty": 0}
    with RecordStore(store_dir) as store:
        samples = corpus.build_samples(
            store,
            min_score=args.min_score if args.min_score is not None else config.min_score,
            min_comments=args.min_comments if args.min_comments is not None else config.min_comments,
            replace_urls=config.replace_urls,
            replace_emails=config.replace_emails,
            counters=counters,
        )
        manifest = corpus.write_corpus(
            samples,
            out,
            fmt=args.format,
            tokenizer=tokenizer,
            manifest_extra={"seed": config.seed, **counters},
        )
    return {"out": str(out), **manifest}


def cmd_train_tokenizer(args, config: PipelineConfig) -> dict:
    corpus_path = args.corpus or config.corpus
    out = args.out or config.vocab
    if not corpus_path or not out:
        raise UsageError("train-tokenizer requires --corpus and --out")
    vocab_size = args.vocab_size or config.vocab_size
    fraction = args.sample_fraction if args.sample_fraction is not None else config.sample_fraction
    seed = args.seed if args.seed is not None else config.seed
    texts = (s.text for s in corpus.read_corpus_jsonl(corpus_path))
    vocab = bpe.train_bpe(
        texts,
        vocab_size,
        sample_fraction=fraction,
        seed=seed,
        isolate_digits=config.isolate_digits,
        n_workers=args.workers,
    )
    bpe.save_vocab(vocab, out)
    return {
        "out": str(out),
        "vocab_size": vocab.vocab_size,
        "n_merges": len(vocab.merges),
        "checksum": vocab.checksum.hex(),
        "seed": seed,
        "sample_fraction": fraction,
    }


def cmd_stats(args, config: PipelineConfig) -> dict:
    corpus_path = args.corpus or config.corpus
    if not corpus_path:
        raise UsageError("stats requires --corpus")
    tokenizer = None
    vocab_path = args.vocab or (config.vocab if args.use_config_vocab else None)
    if vocab_path:
        tokenizer = bpe.load_vocab(vocab_path)
    edges = tuple(args.bucket_edges) if args.bucket_edges else config.bucket_edges
    stats = corpus.corpus_stats(corpus.read_corpus_jsonl(corpus_path), tokenizer, edges)
    return stats.to_dict()


def cmd_plan(args, config: PipelineConfig) -> dict:
    shape = scaling.ModelShape(
        n_layers=args.layers,
        hidden=args.hidden,
        vocab_size=args.vocab_size or config.vocab_size,
        max_positions=args.max_positions or config.max_len,
        head_tied=not args.untied_head,
    )
    params = scaling.estimate_params(shape)
    floor = scaling.min_tokens(params)
    summary = {
        "shape": {
            "n_layers": shape.n_layers,
            "hidden": shape.hidden,
            "vocab_size": shape.vocab_size,
            "max_positions": shape.max_positions,
            "head_tied": shape.head_tied,
        },
        "params": params,
        "min_tokens": floor,
        "steps_for_min_tokens": -(-floor // config.target_tokens),
    }
    if args.gpu_hours is not None:
        summary["dollars"] = scaling.estimate_cost(args.gpu_hours, args.rate, args.perf_ratio)
        summary["gpu_hours"] = args.gpu_hours
    if args.throughput is not None and args.gpu_hours is not None:
        plan = scaling.plan_budget(
            args.gpu_hours,
            [args.throughput],
            [shape],
            rate_per_hour=args.rate,
            perf_ratio=args.perf_ratio,
            batch_tokens=config.target_tokens,
        )
        summary["feasible"] = plan is not None
        if plan is not None:
            summary["steps_for_budget"] = plan.steps_for_budget
    return summary


def cmd_pretrain(args, config: PipelineConfig) -> dict:
    shard_path = args.shards or config.shards
    checkpoint = args.checkpoint or config.checkpoint
    if not shard_path or not checkpoint:
        raise UsageError("pretrain requires --shards and --checkpoint")
    vocab_path = args.vocab or config.vocab
    if not vocab_path:
        raise UsageError("pretrain requires --vocab")
    vocab = bpe.load_vocab(vocab_path)
    reader = shards.ShardReader(shard_path, expected_checksum=vocab.checksum)
    seq_len = min(args.seq_len or config.max_len, args.max_positions or config.max_len)
    model_config = EncoderConfig(
        n_layers=args.layers,
        hidden=args.hidden,
        n_heads=args.heads,
        vocab_size=vocab.vocab_size,
        max_positions=args.max_positions or config.max_len,
        seed=args.seed if args.seed is not None else config.seed,
        tied_head=not args.untied_head,
        vocab_checksum=vocab.checksum,
    )
    model = build_encoder(model_config)
    plan = plan_batches(
        args.target_tokens or config.target_tokens,
        args.micro_batch or config.micro_batch,
        seq_len,
    )
    losses = train_mlm(
        model,
        reader,
        plan,
        steps=args.steps if args.steps is not None else config.steps,
        lr=args.lr if args.lr is not None else config.lr,
        seed=model_config.seed,
        mask_rate=args.mask_rate,
        warmup_steps=args.warmup_steps,
        loss_csv=args.loss_csv,
    )
    save_checkpoint(model, checkpoint)
    return {
        "checkpoint": str(checkpoint),
        "parameter_count": model.parameter_count,
        "steps": len(losses),
        "accumulation_steps": plan.accumulation_steps,
        "effective_tokens": plan.effective_tokens,
        "first_loss": losses[0] if losses else None,
        "final_loss": losses[-1] if losses else None,
        "seed": model_config.seed,
    }


def _read_labeled_jsonl(path: str, vocab: bpe.BpeVocab, max_len: int) -> list[tuple[list[int], int]]:
    data = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            ids = [bpe.CLASS_MARKER_ID] + vocab.encode(obj["text"])
            data.append((ids[:max_len], int(obj["label"])))
    return data


def cmd_finetune(args, config: PipelineConfig) -> dict:
    vocab_path = args.vocab or config.vocab
    if not vocab_path or not args.train:
        raise UsageError("finetune requires --vocab and --train")
    vocab = bpe.load_vocab(vocab_path)
    if args.checkpoint or config.checkpoint:
        model = load_checkpoint(args.checkpoint or config.checkpoint)
    else:
        raise UsageError("finetune requires --checkpoint")
    max_len = min(args.seq_len or config.max_len, model.config.max_positions)
    train_data = _read_labeled_jsonl(args.train, vocab, max_len)
    eval_data = _read_labeled_jsonl(args.eval, vocab, max_len) if args.eval else None
    classifier = attach_head(model, HeadKind.SEQUENCE, args.classes)
    classifier, predictions = finetune(
        classifier,
        train_data,
        eval_data=eval_data,
        batch_size=args.batch_size,
        lr=args.lr,
        epochs=args.epochs,
        seed=args.seed if args.seed is not None else config.seed,
        warmup_steps=args.warmup_steps,
    )
    target = eval_data if eval_data is not None else train_data
    y_true = [label for _, label in target]
    report = metrics.metric_report(y_true, predictions, args.classes, config.metric_mode)
    if args.out_checkpoint:
        save_checkpoint(classifier.encoder, args.out_checkpoint)
    return {"n_train": len(train_data), "n_eval": len(target), **report}


def cmd_mine(args, config: PipelineConfig) -> dict:
    store_dir = args.store_dir or config.store_dir
    out = args.out
    if not store_dir or not out:
        raise UsageError("mine requires --store-dir and --out")
    with RecordStore(store_dir) as store:
        candidates = mining.mine_all(
            store,
            keywords=tuple(args.keywords) if args.keywords else config.keywords,
            levenshtein_min=args.levenshtein_min
            if args.levenshtein_min is not None
            else config.levenshtein_min,
            late_years=args.late_years if args.late_years is not None else config.late_years,
            late_min_score=args.late_min_score
            if args.late_min_score is not None
            else config.late_min_score,
        )
    n = mining.export_candidates(candidates, out)
    counts = {h.value: 0 for h in mining.Heuristic}
    for cand in candidates:
        counts[cand.heuristic.value] += 1
    return {"out": str(out), "total": n, "per_heuristic": counts}


def cmd_sample_annotations(args, config: PipelineConfig) -> dict:
    candidates = mining.import_candidates(args.candidates)
    seed = args.seed if args.seed is not None else config.seed
    sample = mining.sample_for_annotation(candidates, args.n, seed=seed)
    mining.export_candidates(sample.candidates, args.out)
    return {
        "out": str(args.out),
        "n_selected": len(sample.candidates),
        "per_heuristic": sample.per_heuristic,
        "shortfall": sample.shortfall,
        "seed": seed,
    }


def cmd_kappa(args, config: PipelineConfig) -> dict:
    a = mining.import_annotations(args.a)
    b = mining.import_annotations(args.b)
    by_id_a = {r.candidate_id: r.label for r in a}
    by_id_b = {r.candidate_id: r.label for r in b}
    if set(by_id_a) != set(by_id_b):
        raise UsageError("annotation files cover different candidate ids")
    ids = sorted(by_id_a)
    kappa = mining.cohen_kappa([by_id_a[i] for i in ids], [by_id_b[i] for i in ids])
    return {"kappa": kappa, "n": len(ids)}


def cmd_eval(args, config: PipelineConfig) -> dict:
    y_true: list[int] = []
    y_pred: list[int] = []
    with open(args.predictions, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["true", "pred"]:
            raise UsageError(f"{args.predictions}: expected header true<TAB>pred")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise UsageError(f"{args.predictions}:{lineno}: expected 2 fields")
            y_true.append(int(fields[0]))
            y_pred.append(int(fields[1]))
    mode = metrics.WeightMode(args.mode) if args.mode else config.metric_mode
    return metrics.metric_report(y_true, y_pred, args.classes, mode)


# -- parser wiring ---------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sopipeline", description=__doc__)
    parser.add_argument("--config", help=f"config file (default: ${ENV_CONFIG_PATH})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse dump XML into an indexed record store")
    p.add_argument("--posts")
    p.add_argument("--comments")
    p.add_argument("--posthistory")
    p.add_argument("--store-dir")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("build-corpus", help="filter + clean + assemble pre-training samples")
    p.add_argument("--store-dir")
    p.add_argument("--out")
    p.add_argument("--format", choices=("jsonl", "shards"), default="jsonl")
    p.add_argument("--vocab")
    p.add_argument("--min-score", type=int)
    p.add_argument("--min-comments", type=int)
    p.set_defaults(fn=cmd_build_corpus)

    p = sub.add_parser("train-tokenizer", help="learn a byte-level BPE vocabulary")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--sample-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("stats", help="corpus statistics and length histogram")
    p.add_argument("--corpus")
    p.add_argument("--vocab", help="tokenizer for token-length buckets (default: character lengths)")
    p.add_argument(
        "--use-config-vocab",
        action="store_true",
        help="bucket by token length using the config [paths] vocab",
    )
    p.add_argument("--bucket-edges", type=int, nargs="+")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("plan", help="parameter count, token floor, training cost")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--max-positions", type=int)
    p.add_argument("--untied-head", action="store_true")
    p.add_argument("--gpu-hours", type=float)
    p.add_argument("--rate", type=float, default=scaling.DEFAULT_RATE_PER_HOUR)
    p.add_argument("--perf-ratio", type=float, default=scaling.DEFAULT_PERF_RATIO)
    p.add_argument("--throughput", type=float, help="tokens per GPU hour")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("pretrain", help="desk-scale MLM training on token shards")
    p.add_argument("--shards")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-positions", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--target-tokens", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-rate", type=float, default=0.15)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--untied-head", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-csv")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="sequence classification on a checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--checkpoint")
    p.add_argument("--train", help="JSONL with text/label fields")
    p.add_argument("--eval")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-checkpoint")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("mine", help="mine obsoletion candidates from a store")
    p.add_argument("--store-dir")
    p.add_argument("--out")
    p.add_argument("--keywords", nargs="+")
    p.add_argument("--levenshtein-min", type=int)
    p.add_argument("--late-years", type=float)
    p.add_argument("--late-min-score", type=int)
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("sample-annotations", help="balanced annotation draw")
    p.add_argument("--candidates", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample_annotations)

    p = sub.add_parser("kappa", help="inter-annotator agreement from two TSVs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(fn=cmd_kappa)

    p = sub.add_parser("eval", help="weighted metrics from a true/pred TSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--mode", choices=[m.value for m in metrics.WeightMode])
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("SOPIPELINE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config_path = args.config or os.environ.get(ENV_CONFIG_PATH)
        config = load_config(config_path) if config_path else validate(PipelineConfig())
        summary = args.fn(args, config)
        _emit(summary)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
