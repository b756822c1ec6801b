"""micerank: desk-scale re-ranking toolkit.

Cross-encoder attention-mask ablations, a mid-fusion reranker with frozen
cacheable document states, distillation training on a synthetic corpus, a
BM25 retrieve-and-rerank pipeline, and an efficiency benchmark.
"""

from .masking import MaskSpec, MaskStep, Segment, SegmentLayout, build_mask
from .tensor import Tensor, no_grad
from .transformer import ModelConfig, Weights, cross_encoder_forward, init_ce_weights
from .mice import DocState, MiceWeights, from_cross_encoder, mice_forward

__version__ = "0.1.0"

__all__ = [
    "MaskSpec",
    "MaskStep",
    "Segment",
    "SegmentLayout",
    "build_mask",
    "Tensor",
    "no_grad",
    "ModelConfig",
    "Weights",
    "cross_encoder_forward",
    "init_ce_weights",
    "DocState",
    "MiceWeights",
    "from_cross_encoder",
    "mice_forward",
    "__version__",
]
