"""Mid-fusion reranker: independent lower streams, joint upper layers.

The model encodes the query stream ``[CLS, q_1..q_n, SEP1]`` and the document
stream ``[d_1..d_m, SEP2]`` separately through the shared lower layers
(``split_depth`` of them), then runs ``interaction_layers`` joint layers in
which the query stream attends over itself plus the *frozen* document rows.
Document rows are never updated above the split: their keys and values are
re-projected per interaction layer from the layer-``split_depth`` states, so
they can be precomputed once per document and cached (:mod:`.doccache`).

The interaction layers use a single joint softmax per head, seeded from (or
identical to) ordinary self-attention weights. With one interaction layer
and no layer dropping, the model reproduces the fully-severed masked
cross-encoder truncated to ``split_depth + 1`` layers exactly, which is the
correctness anchor the test-suite leans on. Query self-attention inside
interaction layers is retained; the document sink row (SEP2) travels with
the cached states for mask fidelity but is never read by the query stream.

Both streams share one set of lower-layer parameters. During training,
documents are re-encoded online so the lower layers receive document
gradients; the cache is an inference-only optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .masking import doc_stream_mask, interaction_mask, query_stream_mask
from .tensor import Tensor, check_finite
from .transformer import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    LayerWeights,
    ModelConfig,
    Weights,
    embed,
    encoder_layer,
    init_layer_weights,
    score_from_cls,
)

__all__ = [
    "ConsistencyError",
    "DocState",
    "MiceWeights",
    "init_mice_weights",
    "from_cross_encoder",
    "encode_query",
    "encode_document",
    "interaction_layer",
    "mice_forward",
    "mice_score_batch",
    "mice_train_scores",
]


class ConsistencyError(RuntimeError):
    """Frozen document states and model weights come from different checkpoints."""


@dataclass
class DocState:
    """A document's frozen hidden states at the stream-split layer.

    ``states`` holds ``m`` document-token rows plus the trailing sink row,
    i.e. shape ``(m + 1, d)``. ``checkpoint_hash`` records which checkpoint
    produced it; consumers refuse to mix states across checkpoints.
    """

    doc_id: str
    states: np.ndarray
    m: int
    checkpoint_hash: bytes | None = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("document must hold at least one token")
        if self.states.ndim != 2 or self.states.shape[0] != self.m + 1:
            raise ValueError(
                f"states must have {self.m + 1} rows, got shape {self.states.shape}"
            )


@dataclass
class MiceWeights:
    """Parameters of the mid-fusion model.

    ``lower`` serves both streams (one parameter set, two uses); each entry
    of ``interaction`` carries the same parameter shapes as an ordinary
    encoder layer.
    """

    config: ModelConfig
    token_emb: Tensor
    pos_emb: Tensor
    lower: list[LayerWeights]
    interaction: list[LayerWeights]
    score_w: Tensor
    score_b: Tensor
    _fingerprint: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.lower) != self.config.split_depth:
            raise ValueError(
                f"expected {self.config.split_depth} lower layers, got {len(self.lower)}"
            )
        if len(self.interaction) != self.config.interaction_layers:
            raise ValueError(
                f"expected {self.config.interaction_layers} interaction layers, "
                f"got {len(self.interaction)}"
            )

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "token_emb", self.token_emb
        yield "pos_emb", self.pos_emb
        for i, lw in enumerate(self.lower):
            yield from lw.named(f"lower.{i}")
        for i, lw in enumerate(self.interaction):
            yield from lw.named(f"interaction.{i}")
        yield "score_w", self.score_w
        yield "score_b", self.score_b

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def fingerprint(self) -> bytes:
        if self._fingerprint is None:
            from .checkpoint import weights_fingerprint

            self._fingerprint = weights_fingerprint(self)
        return self._fingerprint

    def invalidate_fingerprint(self) -> None:
        self._fingerprint = None


def init_mice_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> MiceWeights:
    """Fresh randomly-initialized mid-fusion parameters."""
    if not config.interaction_layers:
        raise ValueError("config.interaction_layers must be set for a mid-fusion model")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    d = config.hidden
    token_emb = Tensor((rng.standard_normal((config.vocab_size, d)) * 0.02).astype(dtype), requires_grad=True)
    pos_emb = Tensor((rng.standard_normal((config.position_count, d)) * 0.02).astype(dtype), requires_grad=True)
    lower = [init_layer_weights(config, rng, dtype) for _ in range(config.split_depth)]
    inter = [init_layer_weights(config, rng, dtype) for _ in range(config.interaction_layers)]
    score_w = Tensor((rng.standard_normal((d, 1)) * 0.02).astype(dtype), requires_grad=True)
    score_b = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
    return MiceWeights(config, token_emb, pos_emb, lower, inter, score_w, score_b)


def _copy_param(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=True)


def _copy_layer(lw: LayerWeights) -> LayerWeights:
    return LayerWeights(**{name: _copy_param(getattr(lw, name)) for name in LayerWeights.FIELDS})


def from_cross_encoder(ce: Weights, split_depth: int, interaction_count: int) -> MiceWeights:
    """Surgically build a mid-fusion model from cross-encoder weights.

    Layers ``1..split_depth`` become the shared lower stack and layers
    ``split_depth+1..split_depth+interaction_count`` the interaction layers,
    all copied verbatim (the joint softmax is seeded by the original
    self-attention); any layers above are dropped. Embeddings and the scoring
    head carry over unchanged.
    """
    total = ce.config.layers
    if split_depth < 1 or interaction_count < 1 or split_depth + interaction_count > total:
        raise ValueError(
            f"invalid split: split_depth={split_depth}, "
            f"interaction_count={interaction_count}, layers={total}"
        )
    config = replace(
        ce.config,
        layers=split_depth + interaction_count,
        split_depth=split_depth,
        interaction_layers=interaction_count,
    )
    return MiceWeights(
        config=config,
        token_emb=_copy_param(ce.token_emb),
        pos_emb=_copy_param(ce.pos_emb),
        lower=[_copy_layer(ce.layers[i]) for i in range(split_depth)],
        interaction=[
            _copy_layer(ce.layers[split_depth + i]) for i in range(interaction_count)
        ],
        score_w=_copy_param(ce.score_w),
        score_b=_copy_param(ce.score_b),
    )


# --------------------------------------------------------------------------
# stream encoding
# --------------------------------------------------------------------------


def _query_stream_batch(queries: Sequence[Sequence[int]], weights: MiceWeights):
    """Lower-layer forward over query streams; returns (states, lengths)."""
    config = weights.config
    qs = [list(q)[: config.max_query] for q in queries]
    if any(not q for q in qs):
        raise ValueError("query must hold at least one token")
    lengths = [len(q) + 2 for q in qs]
    s_max = max(lengths)
    batch = len(qs)
    token_ids = np.full((batch, s_max), PAD_ID, dtype=np.int64)
    pos_ids = np.zeros((batch, s_max), dtype=np.int64)
    allow = np.zeros((batch, s_max, s_max), dtype=bool)
    for e, q in enumerate(qs):
        n = len(q)
        s = n + 2
        token_ids[e, :s] = [CLS_ID, *q, SEP_ID]
        pos_ids[e, :s] = range(s)
        allow[e, :s, :s] = query_stream_mask(n).allow
        idx = np.arange(s, s_max)
        allow[e, idx, idx] = True
    states = embed(weights, token_ids, pos_ids)
    for lw in weights.lower:
        states = encoder_layer(states, allow, lw, config.heads)
    return states, lengths


def _doc_stream_batch(docs: Sequence[Sequence[int]], weights: MiceWeights):
    """Lower-layer forward over document streams; returns (states, lengths)."""
    config = weights.config
    ds = [list(d)[: config.max_doc] for d in docs]
    if any(not d for d in ds):
        raise ValueError("document must hold at least one token")
    lengths = [len(d) + 1 for d in ds]
    s_max = max(lengths)
    batch = len(ds)
    token_ids = np.full((batch, s_max), PAD_ID, dtype=np.int64)
    pos_ids = np.zeros((batch, s_max), dtype=np.int64)
    allow = np.zeros((batch, s_max, s_max), dtype=bool)
    doc0 = config.max_query + 2
    for e, d in enumerate(ds):
        m = len(d)
        s = m + 1
        token_ids[e, :s] = [*d, SEP_ID]
        pos_ids[e, :s] = range(doc0, doc0 + s)
        allow[e, :s, :s] = doc_stream_mask(m).allow
        idx = np.arange(s, s_max)
        allow[e, idx, idx] = True
    states = embed(weights, token_ids, pos_ids)
    for lw in weights.lower:
        states = encoder_layer(states, allow, lw, config.heads)
    return states, lengths


def encode_query(query_ids: Sequence[int], weights: MiceWeights) -> Tensor:
    """Query-stream states [(n+2), d] after the shared lower layers."""
    states, _ = _query_stream_batch([query_ids], weights)
    return states.reshape(states.shape[1:])


def encode_document(doc_ids: Sequence[int], weights: MiceWeights, doc_id: str = "") -> DocState:
    """Document-stream states, frozen for reuse.

    Always encodes a single document (no cross-document padding), so the
    result is byte-reproducible and identical to what a cache round-trip in
    the same precision returns.
    """
    states, lengths = _doc_stream_batch([doc_ids], weights)
    frozen = np.array(states.data[0], copy=True)
    frozen.setflags(write=False)
    return DocState(
        doc_id=doc_id,
        states=frozen,
        m=lengths[0] - 1,
        checkpoint_hash=weights.fingerprint(),
    )


# --------------------------------------------------------------------------
# interaction layers
# --------------------------------------------------------------------------


def _interaction_allow(
    q_lengths: Sequence[int], d_lengths: Sequence[int], sq_max: int, sd_max: int
) -> np.ndarray:
    """Per-example joint allow matrices [B, sq_max, sq_max + sd_max]."""
    batch = len(q_lengths)
    allow = np.zeros((batch, sq_max, sq_max + sd_max), dtype=bool)
    for e, (sq, sd) in enumerate(zip(q_lengths, d_lengths)):
        base = interaction_mask(sq - 2, sd - 1).allow
        allow[e, :sq, :sq] = base[:, :sq]
        allow[e, :sq, sq_max : sq_max + sd] = base[:, sq:]
        idx = np.arange(sq, sq_max)
        allow[e, idx, idx] = True
    return allow


def _run_interactions(
    q_states: Tensor,
    doc_states: Tensor,
    q_lengths: Sequence[int],
    d_lengths: Sequence[int],
    weights: MiceWeights,
) -> Tensor:
    allow = _interaction_allow(q_lengths, d_lengths, q_states.shape[1], doc_states.shape[1])
    for lw in weights.interaction:
        q_states = encoder_layer(
            q_states, allow, lw, weights.config.heads, kv_states=doc_states
        )
    return q_states


def interaction_layer(q_states: Tensor, doc: DocState, lw: LayerWeights, heads: int) -> Tensor:
    """One joint layer over a single example: the query rows attend over
    themselves plus the frozen document rows; only query rows are updated."""
    sq = q_states.shape[0]
    allow = _interaction_allow([sq], [doc.states.shape[0]], sq, doc.states.shape[0])
    q = q_states.reshape((1, *q_states.shape))
    d = Tensor(doc.states).reshape((1, *doc.states.shape))
    out = encoder_layer(q, allow, lw, heads, kv_states=d)
    return out.reshape(out.shape[1:])


def _check_hash(doc: DocState, weights: MiceWeights) -> None:
    if doc.checkpoint_hash is not None and doc.checkpoint_hash != weights.fingerprint():
        raise ConsistencyError(
            f"document state {doc.doc_id!r} was produced by a different checkpoint"
        )


def mice_forward(query_ids: Sequence[int], doc: DocState, weights: MiceWeights) -> float:
    """Relevance score of one (query, frozen document) pair."""
    return float(mice_score_batch([(query_ids, doc)], weights)[0])


def mice_score_batch(
    items: Sequence[tuple[Sequence[int], DocState]], weights: MiceWeights
) -> np.ndarray:
    """Scores [B] for (query ids, DocState) pairs, batched over items."""
    for _, doc in items:
        _check_hash(doc, weights)
    q_states, q_lengths = _query_stream_batch([q for q, _ in items], weights)
    d_lengths = [doc.states.shape[0] for _, doc in items]
    sd_max = max(d_lengths)
    d = weights.config.hidden
    dtype = q_states.dtype
    doc_buf = np.zeros((len(items), sd_max, d), dtype=dtype)
    for e, (_, doc) in enumerate(items):
        if doc.states.shape[1] != d:
            raise ConsistencyError(
                f"document state width {doc.states.shape[1]} does not match model hidden {d}"
            )
        doc_buf[e, : doc.states.shape[0]] = doc.states
    q_states = _run_interactions(q_states, Tensor(doc_buf), q_lengths, d_lengths, weights)
    scores = check_finite(score_from_cls(q_states, weights), "relevance score")
    return scores.data.copy()


def mice_train_scores(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]], weights: MiceWeights
) -> Tensor:
    """Differentiable scores [B] with documents re-encoded online, so the
    shared lower layers receive document gradients too."""
    q_states, q_lengths = _query_stream_batch([q for q, _ in pairs], weights)
    d_states, d_lengths = _doc_stream_batch([d for _, d in pairs], weights)
    q_states = _run_interactions(q_states, d_states, q_lengths, d_lengths, weights)
    return check_finite(score_from_cls(q_states, weights), "relevance score")
