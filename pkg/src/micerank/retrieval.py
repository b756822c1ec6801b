"""Deterministic tokenizer, Okapi BM25 first stage, and the rerank pipeline.

File formats handled here:

* corpus / queries: JSON-lines, one ``{"id": ..., "text": ...}`` per line
* runs: TREC 6-column ``qid Q0 docid rank score tag``
* qrels: TREC 4-column ``qid 0 docid rel``
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import mice as mice_mod
from . import transformer
from .evalbench import RankedList
from .masking import MaskSpec
from .tensor import no_grad
from .transformer import CLS_ID, FIRST_WORD_ID, PAD_ID, SEP_ID, UNK_ID

__all__ = [
    "Vocab",
    "CorpusStats",
    "split_terms",
    "build_vocab",
    "tokenize",
    "build_corpus_stats",
    "bm25_score",
    "bm25_retrieve",
    "rerank",
    "BM25Scorer",
    "CrossEncoderScorer",
    "MiceScorer",
    "MiceCacheScorer",
    "read_jsonl",
    "write_jsonl",
    "read_trec_run",
    "write_trec_run",
    "read_qrels",
    "write_qrels",
]

log = logging.getLogger(__name__)

_TERM_RE = re.compile(r"[a-z0-9]+")

SPECIAL_TOKENS = {
    "[CLS]": CLS_ID,
    "[SEP]": SEP_ID,
    "[PAD]": PAD_ID,
    "[UNK]": UNK_ID,
}


def split_terms(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters."""
    return _TERM_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    """Token-to-id map; special ids sit below all word ids."""

    token_to_id: dict

    @property
    def size(self) -> int:
        return FIRST_WORD_ID + len(self.token_to_id)

    def id_of(self, term: str) -> int:
        return self.token_to_id.get(term, UNK_ID)

    def encode(self, text: str) -> list[int]:
        return [self.id_of(t) for t in split_terms(text)]

    def save(self, path) -> None:
        tokens = sorted(self.token_to_id, key=self.token_to_id.get)
        with open(path, "w") as f:
            json.dump({"tokens": tokens}, f)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path) as f:
            payload = json.load(f)
        tokens = payload["tokens"]
        return cls({t: FIRST_WORD_ID + i for i, t in enumerate(tokens)})


def build_vocab(texts: Iterable[str]) -> Vocab:
    """Dense word ids over the sorted unique terms of ``texts``."""
    terms = sorted({t for text in texts for t in split_terms(text)})
    return Vocab({t: FIRST_WORD_ID + i for i, t in enumerate(terms)})


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Token ids for ``text``; out-of-vocabulary terms map to UNK. The empty
    string yields [] — scoring layouts substitute a single UNK afterwards."""
    return vocab.encode(text)


def ensure_nonempty(ids: Sequence[int]) -> list[int]:
    """Layouts need at least one token; empty inputs become a single UNK."""
    return list(ids) if len(ids) else [UNK_ID]


# --------------------------------------------------------------------------
# BM25
# --------------------------------------------------------------------------


@dataclass
class CorpusStats:
    """Okapi BM25 corpus statistics plus an in-memory inverted index."""

    postings: dict  # term -> {doc_id: tf}
    doc_len: dict  # doc_id -> token count
    total_docs: int
    avg_doc_len: float


def build_corpus_stats(corpus: Iterable[tuple[str, str]]) -> CorpusStats:
    postings: dict = {}
    doc_len: dict = {}
    for doc_id, text in corpus:
        if doc_id in doc_len:
            raise ValueError(f"duplicate doc id {doc_id!r} in corpus")
        terms = split_terms(text)
        doc_len[doc_id] = len(terms)
        for term in terms:
            postings.setdefault(term, {})
            postings[term][doc_id] = postings[term].get(doc_id, 0) + 1
    if not doc_len:
        raise ValueError("empty corpus")
    total = len(doc_len)
    avg = sum(doc_len.values()) / total
    return CorpusStats(postings, doc_len, total, avg)


def bm25_score(
    query_terms: Sequence[str],
    doc_id: str,
    stats: CorpusStats,
    k1: float = 0.9,
    b: float = 0.4,
) -> float:
    """Okapi BM25 with idf ``ln(1 + (N - df + 0.5) / (df + 0.5))``."""
    if doc_id not in stats.doc_len:
        raise KeyError(f"unknown doc id {doc_id!r}")
    dl = stats.doc_len[doc_id]
    norm = k1 * (1.0 - b + b * dl / stats.avg_doc_len)
    score = 0.0
    for term in query_terms:
        entry = stats.postings.get(term)
        if not entry or doc_id not in entry:
            continue
        tf = entry[doc_id]
        df = len(entry)
        idf = np.log(1.0 + (stats.total_docs - df + 0.5) / (df + 0.5))
        score += idf * tf * (k1 + 1.0) / (tf + norm)
    return float(score)


def bm25_retrieve(
    query_text: str,
    stats: CorpusStats,
    k: int = 1000,
    k1: float = 0.9,
    b: float = 0.4,
) -> list[tuple[str, float]]:
    """Top-``k`` matching documents, ordered by (score desc, doc_id asc)."""
    terms = split_terms(query_text)
    accum: dict = {}
    for term in terms:
        entry = stats.postings.get(term)
        if not entry:
            continue
        df = len(entry)
        idf = np.log(1.0 + (stats.total_docs - df + 0.5) / (df + 0.5))
        for doc_id, tf in entry.items():
            dl = stats.doc_len[doc_id]
            norm = k1 * (1.0 - b + b * dl / stats.avg_doc_len)
            accum[doc_id] = accum.get(doc_id, 0.0) + float(
                idf * tf * (k1 + 1.0) / (tf + norm)
            )
    ranked = sorted(accum.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


# --------------------------------------------------------------------------
# scorers: map (query, candidates) to relevance scores
# --------------------------------------------------------------------------


class BM25Scorer:
    def __init__(self, stats: CorpusStats, k1: float = 0.9, b: float = 0.4):
        self.stats = stats
        self.k1 = k1
        self.b = b

    def available(self, candidates: Sequence[str]):
        missing = [c for c in candidates if c not in self.stats.doc_len]
        return [c for c in candidates if c in self.stats.doc_len], missing

    def score(self, query_text: str, candidates: Sequence[str]) -> dict:
        terms = split_terms(query_text)
        return {c: bm25_score(terms, c, self.stats, self.k1, self.b) for c in candidates}


class _NeuralScorer:
    """Shared chunking/threading machinery for model-backed scorers."""

    def __init__(self, vocab: Vocab, doc_tokens: Mapping[str, Sequence[int]],
                 batch_size: int = 64, threads: int = 1):
        self.vocab = vocab
        self.doc_tokens = doc_tokens
        self.batch_size = batch_size
        self.threads = max(1, threads)

    def available(self, candidates: Sequence[str]):
        missing = [c for c in candidates if c not in self.doc_tokens]
        return [c for c in candidates if c in self.doc_tokens], missing

    def score(self, query_text: str, candidates: Sequence[str]) -> dict:
        q_ids = ensure_nonempty(tokenize(query_text, self.vocab))
        return self.score_ids(q_ids, candidates)

    def score_ids(self, q_ids: Sequence[int], candidates: Sequence[str]) -> dict:
        chunks = [
            list(candidates[i : i + self.batch_size])
            for i in range(0, len(candidates), self.batch_size)
        ]
        out: dict = {}
        with no_grad():
            if self.threads > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    for chunk, scores in zip(
                        chunks, pool.map(lambda c: self._score_chunk(q_ids, c), chunks)
                    ):
                        out.update(zip(chunk, scores))
            else:
                for chunk in chunks:
                    out.update(zip(chunk, self._score_chunk(q_ids, chunk)))
        return out

    def _score_chunk(self, q_ids, chunk) -> np.ndarray:
        raise NotImplementedError


class CrossEncoderScorer(_NeuralScorer):
    """Joint forward under a masking step (the ablation path)."""

    def __init__(self, weights, spec: MaskSpec, vocab, doc_tokens, **kw):
        super().__init__(vocab, doc_tokens, **kw)
        self.weights = weights
        self.spec = spec

    def _score_chunk(self, q_ids, chunk) -> np.ndarray:
        pairs = [(q_ids, ensure_nonempty(self.doc_tokens[c])) for c in chunk]
        return transformer.score_pairs(pairs, self.spec, self.weights).data


class MiceScorer(_NeuralScorer):
    """Mid-fusion scoring with documents encoded on the fly."""

    def __init__(self, weights, vocab, doc_tokens, **kw):
        super().__init__(vocab, doc_tokens, **kw)
        self.weights = weights

    def _score_chunk(self, q_ids, chunk) -> np.ndarray:
        items = [
            (q_ids, mice_mod.encode_document(
                ensure_nonempty(self.doc_tokens[c]), self.weights, doc_id=c))
            for c in chunk
        ]
        return mice_mod.mice_score_batch(items, self.weights)


class MiceCacheScorer:
    """Mid-fusion scoring against precomputed document states."""

    def __init__(self, weights, vocab: Vocab, cache, batch_size: int = 64, threads: int = 1):
        self.weights = weights
        self.vocab = vocab
        self.cache = cache
        self.batch_size = batch_size
        self.threads = max(1, threads)

    def available(self, candidates: Sequence[str]):
        missing = [c for c in candidates if c not in self.cache]
        return [c for c in candidates if c in self.cache], missing

    def score(self, query_text: str, candidates: Sequence[str]) -> dict:
        q_ids = ensure_nonempty(tokenize(query_text, self.vocab))
        return self.score_ids(q_ids, candidates)

    def score_ids(self, q_ids: Sequence[int], candidates: Sequence[str]) -> dict:
        chunks = [
            list(candidates[i : i + self.batch_size])
            for i in range(0, len(candidates), self.batch_size)
        ]

        def run(chunk):
            items = [(q_ids, self.cache.get(c)) for c in chunk]
            return mice_mod.mice_score_batch(items, self.weights)

        out: dict = {}
        with no_grad():
            if self.threads > 1 and len(chunks) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    for chunk, scores in zip(chunks, pool.map(run, chunks)):
                        out.update(zip(chunk, scores))
            else:
                for chunk in chunks:
                    out.update(zip(chunk, run(chunk)))
        return out


def rerank(
    query_id: str,
    query_text: str,
    candidates: Sequence[str],
    scorer,
    k_out: int | None = None,
    on_missing: str = "raise",
) -> RankedList:
    """Re-score ``candidates`` and order by (score desc, doc_id asc).

    ``on_missing`` controls what happens to candidates the scorer cannot
    handle (unknown document, no cached state): ``raise`` (default) or
    ``skip``, which drops them and records them on ``RankedList.skipped``.
    """
    if on_missing not in ("raise", "skip"):
        raise ValueError(f"on_missing must be 'raise' or 'skip', got {on_missing!r}")
    scoreable, missing = scorer.available(candidates)
    if missing:
        if on_missing == "raise":
            raise KeyError(
                f"{len(missing)} candidate(s) cannot be scored, e.g. {missing[:3]}"
            )
        for doc_id in missing:
            log.warning("query %s: skipping unscoreable candidate %s", query_id, doc_id)
    scores = scorer.score(query_text, scoreable)
    items = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    if k_out is not None:
        items = items[:k_out]
    return RankedList(query_id=query_id, items=tuple(items), skipped=tuple(missing))


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def read_jsonl(path) -> list[tuple[str, str]]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append((str(obj["id"]), str(obj["text"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad JSONL record ({exc})") from None
    return records


def write_jsonl(path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w") as f:
        for rec_id, text in records:
            f.write(json.dumps({"id": rec_id, "text": text}) + "\n")


def write_trec_run(path, rankings: Iterable[RankedList], tag: str = "micerank") -> None:
    with open(path, "w") as f:
        for ranking in rankings:
            for rank, (doc_id, score) in enumerate(ranking.items, start=1):
                f.write(f"{ranking.query_id} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_trec_run(path) -> dict:
    """Run file -> {qid: [(doc_id, score), ...]} ordered by stored rank."""
    by_query: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            qid, _, doc_id, rank, score, _ = parts
            by_query.setdefault(qid, []).append((int(rank), doc_id, float(score)))
    return {
        qid: [(doc_id, score) for _, doc_id, score in sorted(rows)]
        for qid, rows in by_query.items()
    }


def read_qrels(path) -> dict:
    """Qrels file -> {qid: {doc_id: rel}}."""
    qrels: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
            qid, _, doc_id, rel = parts
            qrels.setdefault(qid, {})[doc_id] = int(rel)
    return qrels


def write_qrels(path, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w") as f:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                f.write(f"{qid} 0 {doc_id} {qrels[qid][doc_id]}\n")
