from ._backend import backend_name, get_kernels
from .core import (
    DEFAULT_EPS,
    AttentionMapError,
    QualityScores,
    SelectionConfig,
    SelectionMask,
    TraceStep,
    compute_quality,
    compute_winners,
    coverage,
    novelty,
    select_slots,
    select_slots_batch,
    validate_attention,
)

__all__ = [
    "DEFAULT_EPS",
    "AttentionMapError",
    "QualityScores",
    "SelectionConfig",
    "SelectionMask",
    "TraceStep",
    "backend_name",
    "compute_quality",
    "compute_winners",
    "coverage",
    "get_kernels",
    "novelty",
    "select_slots",
    "select_slots_batch",
    "validate_attention",
]
