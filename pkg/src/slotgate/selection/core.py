"""Winner-take-all slot statistics and greedy quality-guided selection.

All functions operate on a token-by-slot attention matrix A (shape N×K)
whose rows are probability distributions over slots. Slot indices are
0-based throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from ._backend import get_kernels, kernels

#: Stabilizer added to mass denominators; small enough that a unit-mass
#: slot's quality is perturbed well below 1e-9.
DEFAULT_EPS = 1e-12

ROW_SUM_ATOL = 1e-5


class AttentionMapError(ValueError):
    """Raised when an attention matrix is not row-stochastic."""


@dataclass(frozen=True)
class SelectionConfig:
    """Thresholds for greedy selection.

    tau: per-token coverage threshold, in (0, 1].
    rho: stop once this fraction of tokens is covered, in (0, 1].
    mu: skip candidates whose novelty falls below this, in [0, 1).
    epsilon: mass-denominator stabilizer.
    use_coverage: when False, selection is disabled and every slot is
        kept (the ungated configuration of the ablation axes).
    order_by_quality: when False, the greedy scan runs in slot-index
        order instead of descending quality.
    """

    tau: float = 0.5
    rho: float = 0.8
    mu: float = 0.3
    epsilon: float = DEFAULT_EPS
    use_coverage: bool = True
    order_by_quality: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must be in [0, 1), got {self.mu}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class QualityScores:
    """Per-slot winner statistics derived from one attention map."""

    winners: np.ndarray      # (N,) int64, winning slot per token
    winner_mass: np.ndarray  # (K,) mass each slot holds on tokens it wins
    total_mass: np.ndarray   # (K,) total mass per slot; sums to N
    quality: np.ndarray      # (K,) winner_mass / (total_mass + eps)


@dataclass(frozen=True)
class TraceStep:
    """One scanned candidate during the greedy loop."""

    slot: int
    quality: float
    novelty: float
    accepted: bool
    coverage_after: float


@dataclass
class SelectionMask:
    """Result of greedy selection: binary mask plus the full scan trace."""

    mask: np.ndarray                 # (K,) uint8
    selected: tuple[int, ...]        # accepted slots, in acceptance order
    trace: list[TraceStep] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return len(self.selected)


def validate_attention(a, atol: float = ROW_SUM_ATOL) -> np.ndarray:
    """Check A is a 2-D row-stochastic matrix; returns it as C-order float64."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise AttentionMapError(f"expected a 2-D N×K matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise AttentionMapError("attention matrix contains non-finite entries")
    if a.min() < -atol:
        raise AttentionMapError("attention matrix has negative entries")
    row_sums = a.sum(axis=1)
    bad = np.abs(row_sums - 1.0) > atol
    if bad.any():
        t = int(np.argmax(bad))
        raise AttentionMapError(
            f"row {t} sums to {row_sums[t]:.8f}, expected 1 within {atol}"
        )
    return a


def compute_winners(a, validate: bool = True) -> np.ndarray:
    """Winning slot per token: argmax over slots, lowest index on ties."""
    a = validate_attention(a) if validate else np.ascontiguousarray(a, dtype=np.float64)
    return kernels.winners(a)


def compute_quality(a, eps: float = DEFAULT_EPS, validate: bool = True) -> QualityScores:
    """Winner mass, total mass and quality score for every slot."""
    a = validate_attention(a) if validate else np.ascontiguousarray(a, dtype=np.float64)
    w, wm, tm, q = kernels.quality_scores(a, eps)
    return QualityScores(winners=w, winner_mass=wm, total_mass=tm, quality=q)


def _active_array(k: int, selected) -> np.ndarray:
    active = np.zeros(k, dtype=np.uint8)
    sel = np.asarray(list(selected), dtype=np.int64)
    if sel.size:
        if sel.min() < 0 or sel.max() >= k:
            raise IndexError(f"slot index out of range for K={k}: {sel}")
        active[sel] = 1
    return active


def coverage(a, selected, tau: float, validate: bool = True):
    """Covered-token mask and coverage rate for a set of selected slots.

    A token counts as covered when the attention mass it gives to the
    selected slots reaches tau (inclusive).
    """
    a = validate_attention(a) if validate else np.ascontiguousarray(a, dtype=np.float64)
    active = _active_array(a.shape[1], selected)
    covered = kernels.covered_mask(a, active, tau).astype(bool)
    return covered, covered.sum() / a.shape[0]


def novelty(a, slot: int, selected, tau: float, eps: float = DEFAULT_EPS,
            validate: bool = True) -> float:
    """Fraction of a candidate slot's mass lying outside the covered set."""
    a = validate_attention(a) if validate else np.ascontiguousarray(a, dtype=np.float64)
    covered, _ = coverage(a, selected, tau, validate=False)
    total = a[:, slot].sum()
    return float(1.0 - a[covered, slot].sum() / (total + eps))


def select_slots(a, cfg: SelectionConfig | None = None, validate: bool = True,
                 backend: str | None = None) -> SelectionMask:
    """Run the greedy quality-guided scan and return mask plus trace.

    Slots are visited in descending quality (ties to the lowest index),
    skipped when their novelty against the currently covered tokens
    falls below mu, and the scan stops as soon as the coverage rate
    reaches rho. The result always keeps at least one slot.
    """
    cfg = cfg or SelectionConfig()
    a = validate_attention(a) if validate else np.ascontiguousarray(a, dtype=np.float64)
    kern = get_kernels(backend)
    mask, slots, quality, nov, accepted, cov = kern.greedy_select(
        a, cfg.tau, cfg.rho, cfg.mu, cfg.epsilon,
        cfg.order_by_quality, cfg.use_coverage,
    )
    trace = [
        TraceStep(
            slot=int(slots[j]),
            quality=float(quality[j]),
            novelty=float(nov[j]),
            accepted=bool(accepted[j]),
            coverage_after=float(cov[j]),
        )
        for j in range(len(slots))
    ]
    selected = tuple(int(slots[j]) for j in range(len(slots)) if accepted[j])
    return SelectionMask(mask=mask, selected=selected, trace=trace)


def select_slots_batch(a_batch, cfg: SelectionConfig | None = None,
                       validate: bool = False):
    """Select per image over a (B, N, K) stack.

    Returns (masks (B, K) uint8, diagnostics dict) where diagnostics
    carry per-image selected-slot counts, mean quality of the selected
    slots and coverage at the stopping point.
    """
    cfg = cfg or SelectionConfig()
    a_batch = np.ascontiguousarray(a_batch, dtype=np.float64)
    if a_batch.ndim != 3:
        raise AttentionMapError(f"expected (B, N, K), got shape {a_batch.shape}")
    b, _, k = a_batch.shape
    masks = np.zeros((b, k), dtype=np.uint8)
    n_selected = np.zeros(b, dtype=np.int64)
    mean_quality = np.zeros(b, dtype=np.float64)
    coverage_at_stop = np.zeros(b, dtype=np.float64)
    for idx in range(b):
        sel = select_slots(a_batch[idx], cfg, validate=validate)
        masks[idx] = sel.mask
        n_selected[idx] = sel.n_selected
        accepted = [s for s in sel.trace if s.accepted]
        mean_quality[idx] = float(np.mean([s.quality for s in accepted]))
        coverage_at_stop[idx] = accepted[-1].coverage_after
    diags = {
        "n_selected": n_selected,
        "mean_quality": mean_quality,
        "coverage_at_stop": coverage_at_stop,
    }
    return masks, diags
