"""Segmentation metrics: dice, Glas-style object dice, Hausdorff distance."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import ClassMask, as_instance
from .data import boundary
from .geometry import class_instances, distance_transform


def dice(g, p) -> float:
    """2|g & p| / (|g| + |p|); 1.0 when both masks are empty."""
    g, p = as_instance(g), as_instance(p)
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {p.shape}")
    total = int(g.sum()) + int(p.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((g & p).sum()) / total


def _best_match(target, candidates):
    best, best_overlap = None, 0
    for j, cand in enumerate(candidates):
        overlap = int((target & cand).sum())
        if overlap > best_overlap:
            best, best_overlap = j, overlap
    return best


def object_dice(gt_instances, pred_instances) -> float:
    """Object-level dice of the Glas benchmark.

    Each ground-truth object is compared with the prediction it overlaps most
    (dice 0 when it overlaps none) and vice versa; each side is averaged with
    area weights and the two sides are averaged. Overlap ties go to the
    earlier instance.
    """
    gts = [as_instance(g) for g in gt_instances]
    preds = [as_instance(p) for p in pred_instances]
    if not gts and not preds:
        return 1.0
    if not gts or not preds:
        return 0.0

    def side(targets, others):
        total = sum(int(t.sum()) for t in targets)
        acc = 0.0
        for t in targets:
            j = _best_match(t, others)
            if j is not None:
                acc += int(t.sum()) / total * dice(t, others[j])
        return acc

    return 0.5 * (side(gts, preds) + side(preds, gts))


def hausdorff(g, p) -> float:
    """Symmetric Hausdorff distance between the boundary pixel sets of two masks.

    A boundary pixel is an object pixel with a 4-neighbour outside the object
    or outside the grid. Distances are Euclidean between pixel centres.
    """
    g, p = as_instance(g), as_instance(p)
    if g.shape != p.shape:
        raise ValueError(f"shape mismatch: {g.shape} vs {p.shape}")
    if not g.any() or not p.any():
        raise ValueError("hausdorff distance needs two non-empty masks")
    bg, bp = boundary(g), boundary(p)
    return float(max(distance_transform(bp)[bg].max(), distance_transform(bg)[bp].max()))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    image: str
    class_dice: list[float]
    object_dice: float
    hausdorff: float  # nan when either mask is empty
    gt_instances: int
    pred_instances: int

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.class_dice))


def evaluate(image_id: str, gt: ClassMask, pred: ClassMask, gt_instances: np.ndarray | None = None) -> MetricReport:
    """Metrics of one prediction.

    ``gt_instances`` is an instance-id raster; without it the ground-truth
    instances are the connected same-class pieces of ``gt``.
    """
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
    per_class = [dice(gt.labels == c, pred.labels == c) for c in range(gt.background)]
    if gt_instances is not None:
        ids = [i for i in np.unique(gt_instances) if i > 0]
        g_inst = [gt_instances == i for i in ids]
    else:
        g_inst = [bits for bits, _ in class_instances(gt)]
    p_inst = [bits for bits, _ in class_instances(pred)]
    g_fg, p_fg = gt.objects(), pred.objects()
    hd = hausdorff(g_fg, p_fg) if g_fg.any() and p_fg.any() else math.nan
    return MetricReport(image_id, per_class, object_dice(g_inst, p_inst), hd, len(g_inst), len(p_inst))


@dataclass
class Aggregate:
    class_dice: list[float]
    mean_dice: float
    object_dice: float
    hausdorff: float
    gt_instances: int
    pred_instances: int
    reports: list[MetricReport] = field(default_factory=list)


def aggregate(reports: list[MetricReport]) -> Aggregate:
    if not reports:
        raise ValueError("no reports to aggregate")
    per_class = np.mean([r.class_dice for r in reports], axis=0).tolist()
    hd = [r.hausdorff for r in reports if not math.isnan(r.hausdorff)]
    return Aggregate(
        per_class,
        float(np.mean([r.mean_dice for r in reports])),
        float(np.mean([r.object_dice for r in reports])),
        float(np.mean(hd)) if hd else math.nan,
        sum(r.gt_instances for r in reports),
        sum(r.pred_instances for r in reports),
        list(reports),
    )


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def reports_csv(reports: list[MetricReport]) -> str:
    """One row per image plus a final ``mean`` row (instance columns summed)."""
    agg = aggregate(reports)
    n_cls = len(agg.class_dice)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image"] + [f"dice_c{c}" for c in range(n_cls)]
               + ["mean_dice", "object_dice", "hausdorff", "gt_instances", "pred_instances"])
    for r in reports:
        w.writerow([r.image] + [_fmt(d) for d in r.class_dice]
                   + [_fmt(r.mean_dice), _fmt(r.object_dice), _fmt(r.hausdorff), r.gt_instances, r.pred_instances])
    w.writerow(["mean"] + [_fmt(d) for d in agg.class_dice]
               + [_fmt(agg.mean_dice), _fmt(agg.object_dice), _fmt(agg.hausdorff), agg.gt_instances, agg.pred_instances])
    return buf.getvalue()


def summary_text(reports: list[MetricReport], title: str = "evaluation") -> str:
    agg = aggregate(reports)
    lines = [f"{title}: {len(reports)} images"]
    lines += [f"  dice class {c}: {d:.4f}" for c, d in enumerate(agg.class_dice)]
    lines += [
        f"  mean dice: {agg.mean_dice:.4f}",
        f"  object dice: {agg.object_dice:.4f}",
        f"  hausdorff: {agg.hausdorff:.3f}",
        f"  instances (gt / predicted): {agg.gt_instances} / {agg.pred_instances}",
    ]
    return "\n".join(lines) + "\n"


def approximation_curve(snapshots, gts) -> list[tuple[int, float]]:
    """Mean foreground dice of the coarse labels against ground truth, per iteration.

    ``snapshots[k]`` holds the task-2 masks after ``k`` updates (``None`` for
    images without task-2 labels, which are skipped); ``gts`` the matching
    ground-truth class masks.
    """
    curve = []
    for k, masks in enumerate(snapshots):
        scores = []
        for mask, gt in zip(masks, gts):
            if mask is None:
                continue
            if gt is None:
                raise ValueError("approximation curve needs ground truth for every labeled image")
            scores.append(dice(gt.objects(), mask.objects()))
        curve.append((k, float(np.mean(scores)) if scores else math.nan))
    return curve


def curve_csv(curve) -> str:
    return "k,mean_task2_dice_vs_gt\n" + "".join(f"{k},{_fmt(v)}\n" for k, v in curve)
