"""Object-centric autoencoder with quality-guided adaptive slot selection.

Pipeline: a patch encoder produces token features, iterative slot
attention groups them into slots, a greedy quality/coverage/novelty scan
picks the slots worth keeping, and a gated decoder reconstructs the
token features from the kept slots. At inference the per-token
winner-take-all over the attention map yields an image-dependent number
of active slots.
"""

__version__ = "0.1.0"

from . import scenes, selection
from .selection import (
    SelectionConfig,
    SelectionMask,
    compute_quality,
    compute_winners,
    coverage,
    novelty,
    select_slots,
)

__all__ = [
    "SelectionConfig",
    "SelectionMask",
    "compute_quality",
    "compute_winners",
    "coverage",
    "novelty",
    "scenes",
    "select_slots",
    "selection",
    "__version__",
]
