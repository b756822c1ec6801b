"""Distillation training on a synthetic corpus with an oracle teacher.

The trainer distills margins: for a (query, positive, negative) triple the
loss is the squared difference between the student's score margin and the
teacher's. The synthetic task clusters documents into topics over disjoint
term pools; queries draw terms from one topic, every same-topic document is
relevant, and the teacher scores weighted term overlap plus a relevance
bonus — so teacher margins are fully predictable from the tokens and a
capable student can fit them.

Scheduling is linear warmup to ``lr_peak`` followed by linear decay to
zero (the decay shape is a recorded choice; linear decay is the conventional
companion to linear warmup). Validation computes RR@10 on held-out queries against
the whole corpus and the best checkpoint is kept. Training is deterministic
under a fixed seed: data order, initialization and update order are all
driven by seeded generators, and batch gradients are reduced in a fixed
order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import save_weights
from .evalbench import rr_at_k
from .masking import MaskStep
from .mice import MiceWeights, init_mice_weights, mice_train_scores
from .retrieval import build_vocab, ensure_nonempty, split_terms, tokenize
from .tensor import NumericError, Tensor, no_grad, select
from .transformer import ModelConfig, init_ce_weights, score_pairs, spec_for

__all__ = [
    "TrainConfig",
    "SynthData",
    "TrainResult",
    "Adam",
    "adam_step",
    "margin_mse",
    "lr_schedule",
    "synth_corpus",
    "teacher_margin_score",
    "train",
    "train_in_memory",
    "finetune_mice",
    "parse_config_text",
    "format_config",
]

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "step0", "step1", "step2", "step3", "mice")


@dataclass
class TrainConfig:
    """Desk-scale defaults; ``reference_profile`` preserves the full-scale
    recipe (125k steps at lr 7e-6 with 5k warmup) without being required
    anywhere."""

    steps: int = 2000
    batch_size: int = 32
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    validate_every: int = 500
    seed: int = 0
    variant: str = "baseline"
    layers: int = 3
    hidden: int = 32
    heads: int = 4
    ff: int = 64
    max_query: int = 8
    max_doc: int = 24
    split_depth: int = 1
    interaction_layers: int = 2
    precision: str = "f32"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.steps > 0 and not self.warmup_steps < self.steps:
            raise ValueError("warmup_steps must be smaller than steps")

    @classmethod
    def reference_profile(cls, **overrides) -> "TrainConfig":
        base = dict(
            steps=125_000,
            batch_size=32,
            lr_peak=7e-6,
            warmup_steps=5_000,
            validate_every=10_000,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def mask_step(self) -> MaskStep | None:
        return None if self.variant == "mice" else MaskStep.parse(self.variant)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            layers=self.layers,
            hidden=self.hidden,
            heads=self.heads,
            ff=self.ff,
            vocab_size=vocab_size,
            max_query=self.max_query,
            max_doc=self.max_doc,
            split_depth=self.split_depth,
            interaction_layers=self.interaction_layers if self.variant == "mice" else 0,
        )


def parse_config_text(text: str) -> TrainConfig:
    """Parse a flat ``key = value`` config file (# starts a comment)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"int": int, "float": float, "str": str}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = casts[types[key]](value)
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


# --------------------------------------------------------------------------
# loss, schedule, optimizer
# --------------------------------------------------------------------------


def margin_mse(s_pos, s_neg, t_pos, t_neg) -> Tensor:
    """Mean squared difference between student and teacher score margins."""
    if not isinstance(s_pos, Tensor):
        s_pos = Tensor(np.atleast_1d(np.asarray(s_pos, dtype=np.float64)))
    if not isinstance(s_neg, Tensor):
        s_neg = Tensor(np.atleast_1d(np.asarray(s_neg, dtype=np.float64)))
    target = np.atleast_1d(np.asarray(t_pos, dtype=s_pos.dtype)) - np.atleast_1d(
        np.asarray(t_neg, dtype=s_pos.dtype)
    )
    diff = s_pos - s_neg - Tensor(target.astype(s_pos.dtype))
    return (diff * diff).mean()


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then linear decay to zero at ``steps``."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


def adam_step(data, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update with bias correction."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    data -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over named parameters; moments start at zero."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in self.params
        }

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            m, v = self.moments[name]
            adam_step(p.data, g, m, v, self.t, lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# synthetic task
# --------------------------------------------------------------------------


@dataclass
class SynthData:
    """Corpus, queries and graded relevance, plus the oracle teacher."""

    corpus: list
    queries: list
    qrels: dict
    _doc_terms: dict = field(default=None, repr=False, compare=False)
    _query_text: dict = field(default=None, repr=False, compare=False)

    def doc_terms(self, doc_id: str) -> frozenset:
        if self._doc_terms is None:
            self._doc_terms = {d: frozenset(split_terms(t)) for d, t in self.corpus}
        return self._doc_terms[doc_id]

    def query_text(self, qid: str) -> str:
        if self._query_text is None:
            self._query_text = dict(self.queries)
        return self._query_text[qid]

    def teacher(self, qid: str, doc_id: str) -> float:
        relevant = self.qrels.get(qid, {}).get(doc_id, 0) > 0
        return teacher_margin_score(
            split_terms(self.query_text(qid)), self.doc_terms(doc_id), relevant
        )

    def doc_ids(self) -> list:
        return [d for d, _ in self.corpus]

    def query_ids(self) -> list:
        return [q for q, _ in self.queries]


TEACHER_OVERLAP_WEIGHT = 2.0
TEACHER_RELEVANCE_BONUS = 3.0


def teacher_margin_score(query_terms: Sequence[str], doc_terms, relevant: bool) -> float:
    """Oracle relevance: weighted term overlap plus a cluster-membership bonus."""
    if query_terms:
        overlap = sum(t in doc_terms for t in query_terms) / len(query_terms)
    else:
        overlap = 0.0
    return TEACHER_OVERLAP_WEIGHT * overlap + TEACHER_RELEVANCE_BONUS * bool(relevant)


def synth_corpus(
    seed: int = 0,
    n_docs: int = 120,
    n_queries: int = 64,
    vocab_size: int = 256,
) -> SynthData:
    """Generate a clustered random corpus.

    Documents are random term bags drawn mostly from their topic's term
    pool; each query samples terms that actually occur in its topic's
    documents, and every same-topic document is relevant, so each query has
    at least one relevant document by construction.
    """
    if min(n_docs, n_queries, vocab_size) < 1:
        raise ValueError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    terms = [f"w{i:03d}" for i in range(vocab_size)]
    n_topics = max(2, min(n_docs, n_docs // 6 + 1))
    pool_size = max(4, (vocab_size // 2) // n_topics)
    shuffled = list(terms)
    rng.shuffle(shuffled)
    pools = [
        shuffled[i * pool_size : (i + 1) * pool_size] for i in range(n_topics)
    ]
    background = shuffled[n_topics * pool_size :] or shuffled[:pool_size]

    corpus = []
    doc_topic = {}
    doc_words: dict = {}
    for i in range(n_docs):
        topic = i % n_topics
        length = int(rng.integers(8, 17))
        words = []
        for _ in range(length):
            source = pools[topic] if rng.random() < 0.7 else background
            words.append(source[int(rng.integers(len(source)))])
        doc_id = f"d{i:04d}"
        corpus.append((doc_id, " ".join(words)))
        doc_topic[doc_id] = topic
        doc_words[doc_id] = words

    pool_sets = [set(p) for p in pools]
    topic_docs = {t: [d for d, tt in doc_topic.items() if tt == t] for t in range(n_topics)}
    topic_terms = {
        t: sorted({w for d in topic_docs[t] for w in doc_words[d] if w in pool_sets[t]})
        for t in range(n_topics)
    }

    queries = []
    qrels: dict = {}
    for i in range(n_queries):
        topic = i % n_topics
        candidates = topic_terms[topic] or pools[topic]
        length = int(rng.integers(2, 5))
        words = [candidates[int(rng.integers(len(candidates)))] for _ in range(length)]
        qid = f"q{i:04d}"
        queries.append((qid, " ".join(words)))
        qrels[qid] = {d: 1 for d in topic_docs[topic]}
    return SynthData(corpus=corpus, queries=queries, qrels=qrels)


def split_queries(data: SynthData) -> tuple[list, list]:
    """Deterministic held-out split: every fourth query validates."""
    qids = sorted(data.query_ids())
    val = qids[3::4]
    train = [q for q in qids if q not in set(val)]
    if not val:
        val = qids[-1:]
        train = qids[:-1] or qids
    return train, val


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class _Task:
    vocab: object
    doc_tokens: dict
    query_tokens: dict
    doc_ids: list
    train_q: list
    val_q: list


def _prepare_task(cfg: TrainConfig, data: SynthData) -> _Task:
    vocab = build_vocab(text for _, text in data.corpus)
    doc_tokens = {
        d: ensure_nonempty(tokenize(t, vocab))[: cfg.max_doc] for d, t in data.corpus
    }
    query_tokens = {
        q: ensure_nonempty(tokenize(t, vocab))[: cfg.max_query] for q, t in data.queries
    }
    train_q, val_q = split_queries(data)
    train_q = [q for q in train_q if data.qrels.get(q)]
    if not train_q:
        raise ValueError("no training query has a relevant document")
    return _Task(vocab, doc_tokens, query_tokens, data.doc_ids(), train_q, val_q)


def evaluate_rr10(
    weights, data: SynthData, task: _Task, qids=None, batch_size=64, spec=None
) -> float:
    """Mean RR@10 over held-out queries, ranking the whole corpus.

    A masked cross-encoder is evaluated under the same mask it trains with
    (``spec``); mid-fusion models encode documents online here.
    """
    qids = list(qids if qids is not None else task.val_q)
    doc_ids = sorted(task.doc_ids)
    is_mice = isinstance(weights, MiceWeights)
    if spec is None and not is_mice:
        spec = spec_for(MaskStep.BASELINE, weights.config)
    values = []
    with no_grad():
        for qid in qids:
            q_ids = task.query_tokens[qid]
            scores = np.empty(len(doc_ids))
            for lo in range(0, len(doc_ids), batch_size):
                chunk = doc_ids[lo : lo + batch_size]
                pairs = [(q_ids, task.doc_tokens[d]) for d in chunk]
                if is_mice:
                    out = mice_train_scores(pairs, weights).data
                else:
                    out = score_pairs(pairs, spec, weights).data
                scores[lo : lo + len(chunk)] = out
            order = sorted(zip(doc_ids, scores), key=lambda x: (-x[1], x[0]))
            values.append(rr_at_k([d for d, _ in order], data.qrels.get(qid, {}), 10))
    return float(np.mean(values)) if values else 0.0


def _sample_triples(rng, cfg, data: SynthData, task: _Task):
    """One batch of (query, positive, negative, teacher margin terms)."""
    triples = []
    for _ in range(cfg.batch_size):
        qid = task.train_q[int(rng.integers(len(task.train_q)))]
        rel = sorted(data.qrels[qid])
        pos = rel[int(rng.integers(len(rel)))]
        while True:
            neg = task.doc_ids[int(rng.integers(len(task.doc_ids)))]
            if neg not in data.qrels[qid]:
                break
        triples.append((qid, pos, neg))
    return triples


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    metrics_path: Path | None
    metrics: list
    best_rr10: float
    weights: object


def train_in_memory(cfg: TrainConfig, data: SynthData, weights=None):
    """Run the training loop without touching disk.

    Returns ``(best_weights, metrics)`` where metrics is a list of
    ``{"step", "loss", "lr", "rr10"}`` dicts, one per validation. The mask of
    a masked variant is applied at every training forward; mid-fusion models
    re-encode documents online so every retained parameter receives
    gradients.
    """
    task = _prepare_task(cfg, data)
    if weights is None:
        mconfig = cfg.model_config(task.vocab.size)
        if cfg.variant == "mice":
            weights = init_mice_weights(mconfig, seed=cfg.seed, dtype=cfg.dtype)
        else:
            weights = init_ce_weights(mconfig, seed=cfg.seed, dtype=cfg.dtype)
    else:
        if weights.config.vocab_size != task.vocab.size:
            raise ValueError(
                f"weights expect vocab {weights.config.vocab_size}, corpus builds {task.vocab.size}"
            )
    is_mice = isinstance(weights, MiceWeights)
    if is_mice != (cfg.variant == "mice"):
        raise ValueError(f"variant {cfg.variant!r} does not match the given weights")
    spec = None if is_mice else spec_for(cfg.mask_step(), weights.config)

    params = list(weights.named_parameters())
    adam = Adam(params)
    rng = np.random.default_rng(cfg.seed + 1)
    metrics: list = []
    best_rr = -1.0
    best_snapshot = None

    def snapshot():
        return {name: p.data.copy() for name, p in params}

    def validate(step: int, loss_value: float, lr: float):
        nonlocal best_rr, best_snapshot
        rr = evaluate_rr10(weights, data, task, spec=spec)
        metrics.append({"step": step, "loss": loss_value, "lr": lr, "rr10": rr})
        if rr > best_rr:
            best_rr = rr
            best_snapshot = snapshot()
        log.info("step %d loss %.5f lr %.2e rr10 %.4f", step, loss_value, lr, rr)

    if cfg.steps == 0:
        best_snapshot = snapshot()
        best_rr = 0.0
    for step in range(1, cfg.steps + 1):
        triples = _sample_triples(rng, cfg, data, task)
        pairs = [(task.query_tokens[q], task.doc_tokens[p]) for q, p, _ in triples]
        pairs += [(task.query_tokens[q], task.doc_tokens[n]) for q, _, n in triples]
        if is_mice:
            scores = mice_train_scores(pairs, weights)
        else:
            scores = score_pairs(pairs, spec, weights)
        both = scores.reshape((2, cfg.batch_size))
        s_pos = select(both, 0, axis=0)
        s_neg = select(both, 1, axis=0)
        t_pos = np.array([data.teacher(q, p) for q, p, _ in triples])
        t_neg = np.array([data.teacher(q, n) for q, _, n in triples])
        loss = margin_mse(s_pos, s_neg, t_pos, t_neg)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise NumericError(f"training diverged at step {step}: loss is not finite")
        loss.backward()
        lr = lr_schedule(step, cfg)
        adam.step(lr)
        adam.zero_grad()
        if step % cfg.validate_every == 0 or step == cfg.steps:
            validate(step, loss_value, lr)

    if best_snapshot is not None:
        for name, p in params:
            p.data[...] = best_snapshot[name]
    weights.invalidate_fingerprint()
    return weights, metrics


def train(cfg: TrainConfig, data: SynthData, out_dir, init_weights=None) -> TrainResult:
    """Train and persist: best checkpoint to ``model.bin``, one JSON line per
    validation to ``metrics.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights, metrics = train_in_memory(cfg, data, weights=init_weights)
    ckpt = out / "model.bin"
    step = cfg.mask_step() or MaskStep.BASELINE
    save_weights(ckpt, weights, step=step)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as f:
        for record in metrics:
            f.write(json.dumps(record) + "\n")
    best = max((m["rr10"] for m in metrics), default=0.0)
    return TrainResult(ckpt, metrics_path, metrics, best, weights)


def finetune_mice(mw: MiceWeights, data: SynthData, steps: int = 0, seed: int = 0) -> float:
    """Briefly fine-tune a mid-fusion model and return held-out RR@10."""
    cfg = TrainConfig(
        steps=steps,
        batch_size=16,
        lr_peak=3e-4,
        warmup_steps=min(20, max(0, steps - 1)),
        validate_every=max(1, steps),
        seed=seed,
        variant="mice",
        layers=mw.config.layers,
        hidden=mw.config.hidden,
        heads=mw.config.heads,
        ff=mw.config.ff,
        max_query=mw.config.max_query,
        max_doc=mw.config.max_doc,
        split_depth=mw.config.split_depth,
        interaction_layers=mw.config.interaction_layers,
    )
    if steps == 0:
        task = _prepare_task(cfg, data)
        if mw.config.vocab_size != task.vocab.size:
            raise ValueError("weights/corpus vocabulary mismatch")
        return evaluate_rr10(mw, data, task)
    weights, metrics = train_in_memory(cfg, data, weights=mw)
    return metrics[-1]["rr10"]
