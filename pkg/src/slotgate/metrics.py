"""Inference-time hard partitioning and segmentation metrics.

The partition comes from per-token winner-take-all on the slot-attention
map, upsampled to pixel resolution. Metrics: best-overlap scores under
many-to-one matching (instance- and class-averaged), mean IoU under
optimal one-to-one matching, and statistics of the per-image inferred
slot count.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from .selection import compute_winners

BACKGROUND_CLASS = -1


@dataclass
class PartitionMap:
    winners: np.ndarray            # (Ht, Wt) int64 token-grid labels
    upsampled_labels: np.ndarray   # (H, W) int64 pixel labels
    active_slot_ids: tuple         # distinct winner ids, ascending
    inferred_k: int


@dataclass
class SampleMetrics:
    index: int
    inferred_k: int
    gt_count: int
    mbo_i: float
    mbo_c: float
    miou: float


@dataclass
class MetricsReport:
    mbo_i: float
    mbo_c: float
    miou: float
    k_correlation: float
    mean_inferred_k: float
    k_histogram: dict
    per_sample: list = field(default_factory=list)
    skipped: int = 0
    include_background: bool = True


def hard_partition(a, grid_dims, image_dims) -> PartitionMap:
    """Winner-take-all token labels, nearest-neighbor upsampled to pixels."""
    ht, wt = grid_dims
    h, w = image_dims
    if h % ht or w % wt:
        raise ValueError(f"image dims {image_dims} not multiples of grid {grid_dims}")
    winners = compute_winners(a).reshape(ht, wt)
    up = np.repeat(np.repeat(winners, h // ht, axis=0), w // wt, axis=1)
    ids = tuple(int(i) for i in np.unique(winners))
    return PartitionMap(
        winners=winners, upsampled_labels=up,
        active_slot_ids=ids, inferred_k=len(ids),
    )


def _iou_matrix(pred: np.ndarray, gt: np.ndarray):
    """Pairwise IoU between every predicted and every GT label.

    Returns (iou (P, G), pred_ids, gt_ids).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred_ids, pred_inv = np.unique(pred.ravel(), return_inverse=True)
    gt_ids, gt_inv = np.unique(gt.ravel(), return_inverse=True)
    p, g = len(pred_ids), len(gt_ids)
    joint = np.bincount(pred_inv * g + gt_inv, minlength=p * g).reshape(p, g)
    pred_area = joint.sum(axis=1, keepdims=True)
    gt_area = joint.sum(axis=0, keepdims=True)
    union = pred_area + gt_area - joint
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, joint / union, 0.0)
    return iou, pred_ids, gt_ids


def _gt_mask_info(sample, include_background: bool):
    """GT label ids and their class ids (background gets its own class)."""
    labels = [0] if include_background else []
    classes = [BACKGROUND_CLASS] if include_background else []
    for i in range(1, sample.object_count + 1):
        labels.append(i)
        classes.append(int(sample.class_ids[i - 1]))
    return labels, classes


def mbo(pred: np.ndarray, sample, level: str = "instance",
        include_background: bool = True) -> float:
    """Mean best overlap: per GT mask, the best IoU over predicted masks.

    Many-to-one matches are allowed. level="instance" averages over GT
    masks; level="class" averages within each class first, then across
    classes. Returns NaN when no GT mask exists.
    """
    if level not in ("instance", "class"):
        raise ValueError(f"unknown level: {level!r}")
    gt = sample.instance_labels.astype(np.int64)
    gt_labels, gt_classes = _gt_mask_info(sample, include_background)
    if not gt_labels:
        return float("nan")
    iou, _, gt_ids = _iou_matrix(pred, gt)
    id_to_col = {int(v): j for j, v in enumerate(gt_ids)}
    best = {}
    for lab in gt_labels:
        col = id_to_col.get(lab)
        best[lab] = float(iou[:, col].max()) if col is not None else 0.0
    if level == "instance":
        return float(np.mean([best[lab] for lab in gt_labels]))
    by_class: dict = {}
    for lab, cls in zip(gt_labels, gt_classes):
        by_class.setdefault(cls, []).append(best[lab])
    return float(np.mean([np.mean(v) for v in by_class.values()]))


def miou_hungarian(pred: np.ndarray, sample,
                   include_background: bool = True) -> float:
    """Mean IoU under the best one-to-one pred-to-GT assignment.

    Unmatched GT masks score zero; rectangular cases behave as if padded
    with zero-IoU dummies. Returns NaN when no GT mask exists.
    """
    gt = sample.instance_labels.astype(np.int64)
    gt_labels, _ = _gt_mask_info(sample, include_background)
    if not gt_labels:
        return float("nan")
    iou, _, gt_ids = _iou_matrix(pred, gt)
    id_to_col = {int(v): j for j, v in enumerate(gt_ids)}
    cols = [id_to_col[lab] for lab in gt_labels if lab in id_to_col]
    matrix = iou[:, cols] if cols else np.zeros((iou.shape[0], 0))
    if matrix.size == 0:
        return 0.0
    rows, assigned = linear_sum_assignment(-matrix)
    return float(matrix[rows, assigned].sum() / len(gt_labels))


def evaluate_model(model, samples, batch_size: int = 64,
                   include_background: bool = True,
                   generator=None) -> MetricsReport:
    """Run the partition pipeline over samples and aggregate all metrics."""
    import torch

    from .training import samples_to_images

    grid = model.cfg.grid_dims
    per_sample = []
    skipped = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start: start + batch_size]
            images = samples_to_images(chunk)
            attn = model.attention_maps(images, generator=generator)
            a = attn.double().cpu().numpy()
            for j, sample in enumerate(chunk):
                if sample.object_count == 0 and not include_background:
                    skipped += 1
                    continue
                h, w = sample.instance_labels.shape
                part = hard_partition(a[j], grid, (h, w))
                pred = part.upsampled_labels
                per_sample.append(SampleMetrics(
                    index=start + j,
                    inferred_k=part.inferred_k,
                    gt_count=sample.object_count,
                    mbo_i=mbo(pred, sample, "instance", include_background),
                    mbo_c=mbo(pred, sample, "class", include_background),
                    miou=miou_hungarian(pred, sample, include_background),
                ))
    return aggregate_report(per_sample, skipped, include_background)


def aggregate_report(per_sample, skipped: int = 0,
                     include_background: bool = True) -> MetricsReport:
    if not per_sample:
        return MetricsReport(
            mbo_i=float("nan"), mbo_c=float("nan"), miou=float("nan"),
            k_correlation=float("nan"), mean_inferred_k=float("nan"),
            k_histogram={}, per_sample=[], skipped=skipped,
            include_background=include_background,
        )
    ks = np.array([s.inferred_k for s in per_sample])
    counts = np.array([s.gt_count for s in per_sample])
    if len(set(ks.tolist())) > 1 and len(set(counts.tolist())) > 1:
        corr = float(spearmanr(ks, counts).statistic)
    else:
        corr = float("nan")
    hist: dict = {}
    for k in ks.tolist():
        hist[k] = hist.get(k, 0) + 1
    return MetricsReport(
        mbo_i=float(np.mean([s.mbo_i for s in per_sample])),
        mbo_c=float(np.mean([s.mbo_c for s in per_sample])),
        miou=float(np.mean([s.miou for s in per_sample])),
        k_correlation=corr,
        mean_inferred_k=float(ks.mean()),
        k_histogram=dict(sorted(hist.items())),
        per_sample=per_sample,
        skipped=skipped,
        include_background=include_background,
    )


def evaluate(ckpt_path, data_dir, include_background: bool = True,
             batch_size: int = 64) -> MetricsReport:
    """Checkpoint + dataset directory -> MetricsReport."""
    from .scenes import load_dataset
    from .training import load_checkpoint

    model, _, _ = load_checkpoint(ckpt_path)
    _, samples = load_dataset(data_dir)
    return evaluate_model(model, samples, batch_size, include_background)


def format_report(report: MetricsReport) -> str:
    """One row per sample plus a summary block, as key=value text."""
    lines = []
    for s in report.per_sample:
        lines.append(
            f"sample={s.index} inferred_k={s.inferred_k} gt_count={s.gt_count} "
            f"mbo_i={s.mbo_i:.6f} mbo_c={s.mbo_c:.6f} miou={s.miou:.6f}"
        )
    lines.append("")
    lines.append(f"samples={len(report.per_sample)}")
    lines.append(f"skipped={report.skipped}")
    lines.append(f"include_background={str(report.include_background).lower()}")
    lines.append(f"mbo_i={report.mbo_i:.6f}")
    lines.append(f"mbo_c={report.mbo_c:.6f}")
    lines.append(f"miou={report.miou:.6f}")
    lines.append(f"k_correlation={report.k_correlation:.6f}")
    lines.append(f"mean_inferred_k={report.mean_inferred_k:.6f}")
    hist = ",".join(f"{k}:{v}" for k, v in report.k_histogram.items())
    lines.append(f"k_histogram={hist}")
    return "\n".join(lines) + "\n"


_OVERLAY_COLORS = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
], dtype=np.uint8)


def _colorize(labels: np.ndarray) -> np.ndarray:
    return _OVERLAY_COLORS[labels.astype(np.int64) % len(_OVERLAY_COLORS)]


def write_overlays(model, samples, out_dir, count: int = 8):
    """Side-by-side panels (image | GT instances | predicted partition)."""
    from PIL import Image

    import torch

    from .training import samples_to_images

    os.makedirs(out_dir, exist_ok=True)
    chunk = samples[:count]
    with torch.no_grad():
        attn = model.attention_maps(samples_to_images(chunk)).double().cpu().numpy()
    for j, sample in enumerate(chunk):
        h, w = sample.instance_labels.shape
        part = hard_partition(attn[j], model.cfg.grid_dims, (h, w))
        img = (np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
        gt_panel = _colorize(sample.instance_labels)
        pred_panel = _colorize(part.upsampled_labels + 1)
        panel = np.concatenate([img, gt_panel, pred_panel], axis=1)
        Image.fromarray(panel).save(os.path.join(out_dir, f"overlay_{j:03d}.png"))
