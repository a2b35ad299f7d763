"""Pure NumPy kernels for winner statistics and greedy slot selection.

Fallback used when the compiled extension is unavailable. Must stay
semantically identical to ``_kernels.pyx``: same tie-breaking, same
scan order, same trace layout.
"""

import numpy as np

BACKEND = "python"


def winners(a):
    """Per-token argmax over slots; ties go to the lowest slot index."""
    return np.argmax(a, axis=1).astype(np.int64)


def quality_scores(a, eps):
    """Return (winners, winner_mass, total_mass, quality) for an N×K map.

    quality[i] is the fraction of slot i's total attention mass that sits
    on tokens it wins; empty slots score 0 thanks to the eps guard.
    """
    n, k = a.shape
    w = winners(a)
    total_mass = a.sum(axis=0)
    winner_mass = np.zeros(k, dtype=np.float64)
    np.add.at(winner_mass, w, a[np.arange(n), w])
    quality = winner_mass / (total_mass + eps)
    return w, winner_mass, total_mass, quality


def covered_mask(a, active, tau):
    """Tokens whose cumulative mass from active slots reaches tau (>=)."""
    sel = np.asarray(active, dtype=bool)
    if not sel.any():
        return np.zeros(a.shape[0], dtype=np.uint8)
    return (a[:, sel].sum(axis=1) >= tau).astype(np.uint8)


def greedy_select(a, tau, rho, mu, eps, order_by_quality, use_coverage):
    """Greedy descending-quality scan with coverage stop and novelty skip.

    Returns (mask, trace_slots, trace_quality, trace_novelty,
    trace_accepted, trace_coverage). One trace entry per scanned
    candidate; coverage is re-evaluated from scratch after every
    acceptance. With ``use_coverage`` False every candidate is accepted
    and the scan never stops early (all-ones mask).
    """
    n, k = a.shape
    _, _, total_mass, quality = quality_scores(a, eps)

    if order_by_quality:
        # lexsort: secondary key first, so equal-quality ties resolve to
        # the lowest slot index
        order = np.lexsort((np.arange(k), -quality))
    else:
        order = np.arange(k)

    mask = np.zeros(k, dtype=np.uint8)
    covered = np.zeros(n, dtype=bool)
    rate = 0.0

    t_slots = np.empty(k + 1, dtype=np.int64)
    t_quality = np.empty(k + 1, dtype=np.float64)
    t_novelty = np.empty(k + 1, dtype=np.float64)
    t_accepted = np.empty(k + 1, dtype=np.uint8)
    t_coverage = np.empty(k + 1, dtype=np.float64)
    steps = 0

    for i in order:
        nov = 1.0 - a[covered, i].sum() / (total_mass[i] + eps)
        if use_coverage and nov < mu:
            t_slots[steps] = i
            t_quality[steps] = quality[i]
            t_novelty[steps] = nov
            t_accepted[steps] = 0
            t_coverage[steps] = rate
            steps += 1
            continue
        mask[i] = 1
        covered = covered_mask(a, mask, tau).astype(bool)
        rate = covered.sum() / n
        t_slots[steps] = i
        t_quality[steps] = quality[i]
        t_novelty[steps] = nov
        t_accepted[steps] = 1
        t_coverage[steps] = rate
        steps += 1
        if use_coverage and rate >= rho:
            break

    if mask.sum() == 0:
        # defensive: cannot happen for the first candidate (novelty of an
        # empty covered set is 1), kept so the mask is never empty
        i = int(np.argmax(quality))
        mask[i] = 1
        covered = covered_mask(a, mask, tau).astype(bool)
        rate = covered.sum() / n
        t_slots[steps] = i
        t_quality[steps] = quality[i]
        t_novelty[steps] = 1.0
        t_accepted[steps] = 1
        t_coverage[steps] = rate
        steps += 1

    return (
        mask,
        t_slots[:steps].copy(),
        t_quality[:steps].copy(),
        t_novelty[:steps].copy(),
        t_accepted[:steps].copy(),
        t_coverage[:steps].copy(),
    )
