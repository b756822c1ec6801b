"""Command-line entry point; every command is a thin composition of module
operations.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Machine-readable output goes to ``--out`` paths; a short human summary is
printed to stdout. All commands accept ``--seed``, ``--precision`` and
``--threads`` (default from the MICE_THREADS environment variable).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, doccache, evalbench, mice, retrieval, training, transformer
from .masking import MaskSpec, MaskStep
from .tensor import NumericError

__all__ = ["main", "dispatch"]


class _UsageExit(Exception):
    def __init__(self, code: int):
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, without killing the host."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit(1)

    def exit(self, status=0, message=None):
        if message:
            print(message, file=sys.stderr, end="")
        raise _UsageExit(status)


def _build_parser() -> _Parser:
    parser = _Parser(prog="micerank", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument(
        "--threads", type=int, default=int(os.environ.get("MICE_THREADS", "1"))
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--docs", type=int, default=120)
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=256)

    p = sub.add_parser("build-vocab", parents=[common], help="derive the word vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="distillation training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--init-from", help="checkpoint to start from (e.g. CE for mid-fusion)")
    p.add_argument("--variant", choices=training.VARIANTS)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, dest="lr_peak")
    p.add_argument("--warmup", type=int, dest="warmup_steps")
    p.add_argument("--validate-every", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ff", type=int)
    p.add_argument("--max-query", type=int)
    p.add_argument("--max-doc", type=int)
    p.add_argument("--ell-star", type=int, dest="split_depth")
    p.add_argument("--k-inter", type=int, dest="interaction_layers")

    p = sub.add_parser("ablate", parents=[common], help="rerank under a masking step")
    p.add_argument("--model", required=True)
    p.add_argument("--step", required=True, help="baseline or 0..3")
    p.add_argument("--ell-star", type=int, dest="split_depth",
                   help="override the stream-split depth for step 3")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", required=True, help="TREC run with first-stage candidates")
    p.add_argument("--out", required=True)
    p.add_argument("--k-out", type=int)
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("encode-docs", parents=[common], help="precompute document states")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bm25", parents=[common], help="first-stage retrieval")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--k1", type=float, default=0.9)
    p.add_argument("--b", type=float, default=0.4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerank", parents=[common], help="neural re-ranking of candidates")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=evalbench.MODES, default="ce")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--cache", help="document-state cache (mice-precomp mode)")
    p.add_argument("--step", help="mask override for ce mode (default: as trained)")
    p.add_argument("--out", required=True)
    p.add_argument("--k-out", type=int)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                   help="fail on cache/checkpoint mismatch or missing documents")

    p = sub.add_parser("eval", parents=[common], help="score a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metric", default="ndcg@10", help="ndcg@K or rr@K")

    p = sub.add_parser("bench", parents=[common], help="latency/memory benchmark")
    p.add_argument("--mode", choices=evalbench.MODES, required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--m", type=int, default=128)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--ff", type=int, default=256)
    p.add_argument("--vocab-size", type=int, default=1024)
    p.add_argument("--ell-star", type=int, default=4, dest="split_depth")
    p.add_argument("--k-inter", type=int, default=3, dest="interaction_layers")
    p.add_argument("--out")

    p = sub.add_parser("sweep", parents=[common], help="interaction-layer-count sweep")
    p.add_argument("--model", required=True, help="trained cross-encoder checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--ell-star", type=int, dest="split_depth")
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int)
    p.add_argument("--finetune-steps", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _dtype(args):
    return np.float64 if args.precision == "f64" else np.float32


def _load_data(corpus_path, queries_path, qrels_path=None) -> training.SynthData:
    corpus = retrieval.read_jsonl(corpus_path)
    queries = retrieval.read_jsonl(queries_path)
    qrels = retrieval.read_qrels(qrels_path) if qrels_path else {}
    return training.SynthData(corpus=corpus, queries=queries, qrels=qrels)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    data = training.synth_corpus(
        seed=args.seed, n_docs=args.docs, n_queries=args.queries, vocab_size=args.vocab_size
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    retrieval.write_jsonl(out / "corpus.jsonl", data.corpus)
    retrieval.write_jsonl(out / "queries.jsonl", data.queries)
    retrieval.write_qrels(out / "qrels.tsv", data.qrels)
    print(
        f"wrote {len(data.corpus)} docs, {len(data.queries)} queries, "
        f"qrels for {len(data.qrels)} queries to {out}"
    )
    return 0


def _cmd_build_vocab(args) -> int:
    corpus = retrieval.read_jsonl(args.corpus)
    vocab = retrieval.build_vocab(text for _, text in corpus)
    vocab.save(args.out)
    print(f"vocabulary of {vocab.size} ids ({vocab.size - transformer.FIRST_WORD_ID} words) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.config:
        cfg = training.parse_config_text(Path(args.config).read_text())
    else:
        cfg = training.TrainConfig()
    overrides = {
        name: getattr(args, name)
        for name in (
            "variant", "steps", "batch_size", "lr_peak", "warmup_steps",
            "validate_every", "layers", "hidden", "heads", "ff",
            "max_query", "max_doc", "split_depth", "interaction_layers",
        )
        if getattr(args, name) is not None
    }
    overrides["seed"] = args.seed
    overrides["precision"] = args.precision
    cfg = training.TrainConfig(**{**cfg.__dict__, **overrides})
    data = _load_data(args.corpus, args.queries, args.qrels)
    init = None
    if args.init_from:
        loaded, _ = checkpoint.load_weights(args.init_from, dtype=cfg.dtype)
        if cfg.variant == "mice" and not isinstance(loaded, mice.MiceWeights):
            loaded = mice.from_cross_encoder(loaded, cfg.split_depth, cfg.interaction_layers)
        init = loaded
    result = training.train(cfg, data, args.out_dir, init_weights=init)
    last = result.metrics[-1]["rr10"] if result.metrics else float("nan")
    print(
        f"trained {cfg.variant} for {cfg.steps} steps: best RR@10 {result.best_rr10:.4f} "
        f"(last {last:.4f}); checkpoint {result.checkpoint_path}"
    )
    return 0


def _rerank_run(args, scorer, queries, candidates_by_query, on_missing) -> int:
    rankings = []
    skipped_total = 0
    for qid, text in queries:
        candidates = [d for d, _ in candidates_by_query.get(qid, [])]
        if not candidates:
            continue
        ranking = retrieval.rerank(
            qid, text, candidates, scorer, k_out=args.k_out, on_missing=on_missing
        )
        skipped_total += len(ranking.skipped)
        rankings.append(ranking)
    retrieval.write_trec_run(args.out, rankings, tag=args.command)
    print(
        f"reranked {len(rankings)} queries -> {args.out}"
        + (f" ({skipped_total} candidates skipped)" if skipped_total else "")
    )
    return 0


def _cmd_ablate(args) -> int:
    weights, _ = checkpoint.load_weights(args.model, dtype=_dtype(args))
    step = MaskStep.parse(args.step)
    config = weights.config
    split = args.split_depth if args.split_depth is not None else config.split_depth
    spec = MaskSpec(step, split_depth=split, total_layers=config.layers)
    corpus = retrieval.read_jsonl(args.corpus)
    vocab = retrieval.build_vocab(text for _, text in corpus)
    if vocab.size != config.vocab_size:
        raise ValueError(
            f"corpus vocabulary ({vocab.size}) does not match checkpoint ({config.vocab_size})"
        )
    doc_tokens = {d: retrieval.ensure_nonempty(vocab.encode(t)) for d, t in corpus}
    scorer = retrieval.CrossEncoderScorer(
        weights, spec, vocab, doc_tokens, batch_size=args.batch_size, threads=args.threads
    )
    queries = retrieval.read_jsonl(args.queries)
    candidates = retrieval.read_trec_run(args.candidates)
    return _rerank_run(args, scorer, queries, candidates, on_missing="raise")


def _cmd_encode_docs(args) -> int:
    weights, _ = checkpoint.load_weights(args.model, dtype=np.float32)
    if not isinstance(weights, mice.MiceWeights):
        raise ValueError("encode-docs needs a mid-fusion checkpoint (kind mice)")
    corpus = retrieval.read_jsonl(args.corpus)
    vocab = retrieval.build_vocab(text for _, text in corpus)
    if vocab.size != weights.config.vocab_size:
        raise ValueError(
            f"corpus vocabulary ({vocab.size}) does not match checkpoint "
            f"({weights.config.vocab_size})"
        )
    from .tensor import no_grad

    states = []
    with no_grad():
        for doc_id, text in corpus:
            ids = retrieval.ensure_nonempty(vocab.encode(text))
            states.append(mice.encode_document(ids, weights, doc_id=doc_id))
    doccache.write_cache(
        args.out,
        states,
        hidden=weights.config.hidden,
        split_depth=weights.config.split_depth,
        checkpoint_hash=weights.fingerprint(),
    )
    print(f"encoded {len(states)} documents -> {args.out}")
    return 0


def _cmd_bm25(args) -> int:
    corpus = retrieval.read_jsonl(args.corpus)
    stats = retrieval.build_corpus_stats(corpus)
    queries = retrieval.read_jsonl(args.queries)
    rankings = []
    for qid, text in queries:
        ranked = retrieval.bm25_retrieve(text, stats, k=args.k, k1=args.k1, b=args.b)
        rankings.append(evalbench.RankedList(query_id=qid, items=tuple(ranked)))
    retrieval.write_trec_run(args.out, rankings, tag="bm25")
    print(f"retrieved top-{args.k} for {len(rankings)} queries -> {args.out}")
    return 0


def _cmd_rerank(args) -> int:
    dtype = _dtype(args)
    weights, trained_step = checkpoint.load_weights(args.model, dtype=dtype)
    corpus = retrieval.read_jsonl(args.corpus)
    vocab = retrieval.build_vocab(text for _, text in corpus)
    if vocab.size != weights.config.vocab_size:
        raise ValueError(
            f"corpus vocabulary ({vocab.size}) does not match checkpoint "
            f"({weights.config.vocab_size})"
        )
    doc_tokens = {d: retrieval.ensure_nonempty(vocab.encode(t)) for d, t in corpus}
    on_missing = "raise" if args.strict else "skip"
    if args.mode == "ce":
        if not isinstance(weights, transformer.Weights):
            raise ValueError("ce mode needs a cross-encoder checkpoint")
        step = MaskStep.parse(args.step) if args.step else trained_step
        spec = transformer.spec_for(step, weights.config)
        scorer = retrieval.CrossEncoderScorer(
            weights, spec, vocab, doc_tokens, batch_size=args.batch_size, threads=args.threads
        )
    else:
        if not isinstance(weights, mice.MiceWeights):
            raise ValueError(f"{args.mode} mode needs a mid-fusion checkpoint")
        if args.mode == "mice":
            scorer = retrieval.MiceScorer(
                weights, vocab, doc_tokens, batch_size=args.batch_size, threads=args.threads
            )
        else:
            if not args.cache:
                raise ValueError("mice-precomp mode needs --cache")
            cache = doccache.read_cache(
                args.cache, expected_hash=weights.fingerprint(), strict=args.strict
            )
            scorer = retrieval.MiceCacheScorer(
                weights, vocab, cache, batch_size=args.batch_size, threads=args.threads
            )
    queries = retrieval.read_jsonl(args.queries)
    candidates = retrieval.read_trec_run(args.candidates)
    return _rerank_run(args, scorer, queries, candidates, on_missing)


def _cmd_eval(args) -> int:
    run = retrieval.read_trec_run(args.run)
    qrels = retrieval.read_qrels(args.qrels)
    value = evalbench.evaluate_run(run, qrels, args.metric)
    print(f"{value:.4f}")
    return 0


def _cmd_bench(args) -> int:
    config = transformer.ModelConfig(
        layers=args.layers,
        hidden=args.hidden,
        heads=args.heads,
        ff=args.ff,
        vocab_size=args.vocab_size,
        max_query=max(args.n, 1),
        max_doc=max(args.m, 1),
        split_depth=args.split_depth,
        interaction_layers=args.interaction_layers,
    )
    report = evalbench.bench_latency(
        config,
        args.mode,
        batch=args.batch,
        n=args.n,
        m=args.m,
        trials=args.trials,
        warmup=args.warmup,
        seed=args.seed,
        threads=args.threads,
    )
    print(report.summary())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def _cmd_sweep(args) -> int:
    weights, _ = checkpoint.load_weights(args.model, dtype=_dtype(args))
    if not isinstance(weights, transformer.Weights):
        raise ValueError("sweep starts from a cross-encoder checkpoint")
    data = _load_data(args.corpus, args.queries, args.qrels)
    split = args.split_depth if args.split_depth is not None else weights.config.split_depth
    k_max = args.k_max if args.k_max is not None else weights.config.layers - split
    rows = evalbench.layer_drop_sweep(
        weights,
        split,
        range(args.k_min, k_max + 1),
        data,
        finetune_steps=args.finetune_steps,
        seed=args.seed,
    )
    evalbench.write_sweep_csv(args.out, rows)
    for k, metric in rows:
        print(f"k_inter={k:<3d} rr10={metric:.4f}")
    print(f"sweep table -> {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "encode-docs": _cmd_encode_docs,
    "bm25": _cmd_bm25,
    "rerank": _cmd_rerank,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "sweep": _cmd_sweep,
}


def dispatch(argv) -> int:
    """Run one command; returns the process exit code instead of raising."""
    try:
        args = _build_parser().parse_args(argv)
    except _UsageExit as exc:
        return exc.code
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (
        ValueError,
        KeyError,
        IndexError,
        OSError,
        json.JSONDecodeError,
        doccache.CacheMismatchError,
        mice.ConsistencyError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
