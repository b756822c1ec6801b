"""Segment layouts and per-layer attention allow-matrices.

A scored pair is laid out as ``[CLS, q_1..q_n, SEP1, d_1..d_m, SEP2]``. The
ablation scheme restricts which segments may attend to which, in five
settings of increasing strictness:

==========  ==================================================================
baseline    every segment attends to every segment
step 0      separators become dedicated sinks (SEP1 for the query, SEP2 for
            the document) and stop receiving from anyone; CLS stops sending
step 1      step 0, plus CLS no longer reads the document side
step 2      step 1, plus the document no longer reads the query
step 3      step 2, plus the query no longer reads the document in layers
            ``1..split_depth`` — below that depth the two streams are fully
            independent (block-diagonal masks)
==========  ==================================================================

The full allow-sets per target segment:

=========  =====================  ===========================================
step       target                 allowed sources
=========  =====================  ===========================================
step 0     CLS                    CLS, Q, SEP1, D, SEP2
           Q                      Q, SEP1, D
           D                      D, SEP2, Q
           SEP1 / SEP2            itself only
step 1     CLS                    CLS, Q, SEP1
step 2     D                      D, SEP2
step 3     Q (layer <= split)     Q, SEP1
=========  =====================  ===========================================

Separators attend strictly to themselves from step 0 on (including across
SEP1<->SEP2), which makes the step-3 masks literally block-diagonal over
{CLS, Q, SEP1} x {D, SEP2} and the sinks static value reservoirs.

Masks are cached per (n, m, step, layer regime) and returned read-only, so
they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

__all__ = [
    "Segment",
    "MaskStep",
    "SegmentLayout",
    "MaskSpec",
    "AttentionMask",
    "allowed_sources",
    "build_mask",
    "query_stream_mask",
    "doc_stream_mask",
    "interaction_mask",
]


class Segment(IntEnum):
    CLS = 0
    Q = 1
    SEP1 = 2
    D = 3
    SEP2 = 4


class MaskStep(Enum):
    BASELINE = "baseline"
    STEP0 = "step0"
    STEP1 = "step1"
    STEP2 = "step2"
    STEP3 = "step3"

    @classmethod
    def parse(cls, text: str) -> "MaskStep":
        text = str(text).strip().lower()
        for step in cls:
            if text in (step.value, step.value.removeprefix("step")):
                return step
        raise ValueError(f"unknown masking step {text!r}")


_ALL = frozenset(Segment)

_STEP0 = {
    Segment.CLS: frozenset({Segment.CLS, Segment.Q, Segment.SEP1, Segment.D, Segment.SEP2}),
    Segment.Q: frozenset({Segment.Q, Segment.SEP1, Segment.D}),
    Segment.D: frozenset({Segment.D, Segment.SEP2, Segment.Q}),
    Segment.SEP1: frozenset({Segment.SEP1}),
    Segment.SEP2: frozenset({Segment.SEP2}),
}
_STEP1 = {**_STEP0, Segment.CLS: frozenset({Segment.CLS, Segment.Q, Segment.SEP1})}
_STEP2 = {**_STEP1, Segment.D: frozenset({Segment.D, Segment.SEP2})}
_STEP3_SPLIT = {**_STEP2, Segment.Q: frozenset({Segment.Q, Segment.SEP1})}


@dataclass(frozen=True)
class SegmentLayout:
    """Positions of a joint query-document sequence.

    ``query_len`` (n) and ``doc_len`` (m) are token counts; the sequence is
    ``[CLS] + n query tokens + [SEP1] + m document tokens + [SEP2]``, total
    length ``n + m + 3``.
    """

    query_len: int
    doc_len: int

    def __post_init__(self):
        if self.query_len < 1:
            raise ValueError(f"query must hold at least one token, got {self.query_len}")
        if self.doc_len < 1:
            raise ValueError(f"document must hold at least one token, got {self.doc_len}")

    @property
    def length(self) -> int:
        return self.query_len + self.doc_len + 3

    def segments(self) -> np.ndarray:
        """Segment code per position, as an int8 vector."""
        n, m = self.query_len, self.doc_len
        seg = np.empty(self.length, dtype=np.int8)
        seg[0] = Segment.CLS
        seg[1 : n + 1] = Segment.Q
        seg[n + 1] = Segment.SEP1
        seg[n + 2 : n + 2 + m] = Segment.D
        seg[n + 2 + m] = Segment.SEP2
        return seg

    def segment_at(self, position: int) -> Segment:
        return Segment(self.segments()[position])


@dataclass(frozen=True)
class MaskSpec:
    """Which masking step to apply, and for step 3 down to which depth.

    ``split_depth`` is the number of lower layers (1-based, inclusive) in
    which the query additionally stops reading the document; it only matters
    for step 3. ``total_layers`` is the model depth L.
    """

    step: MaskStep
    split_depth: int = 0
    total_layers: int = 0

    def __post_init__(self):
        if self.step is MaskStep.STEP3:
            if self.split_depth < 1:
                raise ValueError("step 3 needs split_depth >= 1")
            if self.total_layers and self.split_depth > self.total_layers:
                raise ValueError(
                    f"split_depth {self.split_depth} exceeds total layers {self.total_layers}"
                )

    def severed(self, layer_index: int) -> bool:
        """True when this layer fully separates the query and document streams."""
        return self.step is MaskStep.STEP3 and layer_index <= self.split_depth


BASELINE_SPEC = MaskSpec(MaskStep.BASELINE)


@dataclass(frozen=True)
class AttentionMask:
    """Boolean allow-matrix; rows are attending targets, columns sources."""

    allow: np.ndarray

    def __post_init__(self):
        if not self.allow.any(axis=1).all():
            raise ValueError("attention mask has a row with no allowed source")


def allowed_sources(
    step: MaskStep, target: Segment, layer_index: int = 1, split_depth: int = 0
) -> frozenset:
    """The set of segments ``target`` may attend to at ``layer_index``."""
    if step is MaskStep.BASELINE:
        return _ALL
    if step is MaskStep.STEP0:
        return _STEP0[target]
    if step is MaskStep.STEP1:
        return _STEP1[target]
    if step is MaskStep.STEP2:
        return _STEP2[target]
    if step is MaskStep.STEP3:
        table = _STEP3_SPLIT if layer_index <= split_depth else _STEP2
        return table[target]
    raise ValueError(f"unknown step {step!r}")


def _segment_table(step: MaskStep, layer_index: int, split_depth: int) -> np.ndarray:
    table = np.zeros((len(Segment), len(Segment)), dtype=bool)
    for target in Segment:
        for source in allowed_sources(step, target, layer_index, split_depth):
            table[target, source] = True
    return table


_MASK_CACHE: dict = {}


def build_mask(layout: SegmentLayout, spec: MaskSpec, layer_index: int) -> AttentionMask:
    """Expand the segment-level rules of ``spec`` to position granularity."""
    if spec.total_layers and not 1 <= layer_index <= spec.total_layers:
        raise ValueError(f"layer index {layer_index} outside 1..{spec.total_layers}")
    key = (layout.query_len, layout.doc_len, spec.step, spec.severed(layer_index))
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    seg = layout.segments()
    table = _segment_table(spec.step, layer_index, spec.split_depth)
    allow = table[seg[:, None], seg[None, :]]
    allow.setflags(write=False)
    mask = AttentionMask(allow)
    _MASK_CACHE[key] = mask
    return mask


# --------------------------------------------------------------------------
# stream-level masks used by the mid-fusion model; these are the restriction
# of the fully-severed step-3 rules to the two independent streams, and of
# the post-split rules to the joint interaction pattern.
# --------------------------------------------------------------------------


def _stream_codes_query(query_len: int) -> np.ndarray:
    seg = np.empty(query_len + 2, dtype=np.int8)
    seg[0] = Segment.CLS
    seg[1 : query_len + 1] = Segment.Q
    seg[query_len + 1] = Segment.SEP1
    return seg


def _stream_codes_doc(doc_len: int) -> np.ndarray:
    seg = np.empty(doc_len + 1, dtype=np.int8)
    seg[:doc_len] = Segment.D
    seg[doc_len] = Segment.SEP2
    return seg


def query_stream_mask(query_len: int) -> AttentionMask:
    """Intra-stream mask over ``[CLS, Q x n, SEP1]``: CLS reads the stream,
    query tokens read each other and their sink, SEP1 only itself."""
    key = ("qstream", query_len)
    hit = _MASK_CACHE.get(key)
    if hit is None:
        seg = _stream_codes_query(query_len)
        table = _segment_table(MaskStep.STEP3, 1, 1)
        allow = table[seg[:, None], seg[None, :]]
        allow.setflags(write=False)
        hit = _MASK_CACHE[key] = AttentionMask(allow)
    return hit


def doc_stream_mask(doc_len: int) -> AttentionMask:
    """Intra-stream mask over ``[D x m, SEP2]``: document tokens read each
    other and their sink, SEP2 only itself."""
    key = ("dstream", doc_len)
    hit = _MASK_CACHE.get(key)
    if hit is None:
        seg = _stream_codes_doc(doc_len)
        table = _segment_table(MaskStep.STEP3, 1, 1)
        allow = table[seg[:, None], seg[None, :]]
        allow.setflags(write=False)
        hit = _MASK_CACHE[key] = AttentionMask(allow)
    return hit


def interaction_mask(query_len: int, doc_len: int) -> AttentionMask:
    """Joint mask for an interaction layer.

    Rows cover the query stream ``[CLS, Q x n, SEP1]``; columns cover the
    query stream followed by the document rows ``[D x m, SEP2]``. Query
    tokens read themselves, their sink and the document tokens; CLS and SEP1
    never read the document side, and nobody reads SEP2.
    """
    key = ("interaction", query_len, doc_len)
    hit = _MASK_CACHE.get(key)
    if hit is None:
        rows = _stream_codes_query(query_len)
        cols = np.concatenate([rows, _stream_codes_doc(doc_len)])
        table = _segment_table(MaskStep.STEP3, 2, 1)  # post-split rules
        allow = table[rows[:, None], cols[None, :]]
        allow.setflags(write=False)
        hit = _MASK_CACHE[key] = AttentionMask(allow)
    return hit
