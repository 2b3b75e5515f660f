"""Style fusion attention, AdaIN key fusion and a desk-scale fine-tuning harness on synthetic multiview data."""

from .adain import ChannelStats, adain, channel_stats
from .fusion import (
    FusedOutput,
    FusionConfig,
    ProjectionSet,
    StyleMask,
    baseline_attention,
    fused_attention,
    fused_attention_regions,
)
from .tensor_core import (
    DomainError,
    FeatureMap,
    NumericError,
    SeededRng,
    ShapeError,
    TokenMatrix,
    flatten_tokens,
    matmul,
    seeded_normal,
    softmax_rows,
    unflatten_tokens,
)

__version__ = "0.1.0"

__all__ = [
    "ChannelStats",
    "DomainError",
    "FeatureMap",
    "FusedOutput",
    "FusionConfig",
    "NumericError",
    "ProjectionSet",
    "SeededRng",
    "ShapeError",
    "StyleMask",
    "TokenMatrix",
    "adain",
    "baseline_attention",
    "channel_stats",
    "flatten_tokens",
    "fused_attention",
    "fused_attention_regions",
    "matmul",
    "seeded_normal",
    "softmax_rows",
    "unflatten_tokens",
]
