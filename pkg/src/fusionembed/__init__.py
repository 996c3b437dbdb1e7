"""Multi-vector embeddings fused by logsumexp over global and fine-grained similarities,
trained contrastively with cached gradients and hardness-weighted negatives."""

from .errors import FusionEmbedError
from .multivec import FAMILIES, FULL_MASK, Aggregator, EmbeddingSet, PatternMask, similarity_breakdown

__version__ = "0.1.0"

__all__ = [
    "FAMILIES",
    "FULL_MASK",
    "Aggregator",
    "EmbeddingSet",
    "FusionEmbedError",
    "PatternMask",
    "similarity_breakdown",
    "__version__",
]
