"""Segmentation metrics (per-sample IoU, mIoU, oIoU, P@k) and worst-case reporting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)

# Report categories for manual annotation of failure cases. Keys are the
# long-form names; two of them are also known under shorter table aliases.
ERROR_CATEGORIES = {
    "SC": "serious comprehension error",
    "RE": "reference/exophora resolution error",
    "SEO": "segmentation of extra objects",
    "OUS": "over- or under-segmentation",
    "NSG": "no segmentation generated",
    "SNI": "segmentation of non-target objects in the instruction",
    "AE": "annotation error",
}
CATEGORY_ALIASES = {"SEO": "BTE", "OUS": "WNS"}


def iou(pred, gt) -> float:
    """Intersection over union of two binary masks; 0.0 for an empty union."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum()) / union


@dataclass
class EvalResult:
    per_sample_iou: list[float]
    miou: float
    oiou: float
    precision: dict[float, float]  # threshold -> P@k
    n: int


def evaluate(preds, gts) -> EvalResult:
    """Aggregate metrics over paired prediction / ground-truth mask lists.

    mIoU averages per-sample IoUs; oIoU pools intersections and unions over
    the whole set; P@k counts samples whose IoU strictly exceeds k.
    """
    if len(preds) != len(gts):
        raise ValueError(f"list lengths differ: {len(preds)} vs {len(gts)}")
    if len(preds) == 0:
        raise ValueError("cannot evaluate an empty sample list")
    ious: list[float] = []
    inter_sum = 0
    union_sum = 0
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        inter = int(np.logical_and(pred, gt).sum())
        union = int(np.logical_or(pred, gt).sum())
        inter_sum += inter
        union_sum += union
        ious.append(inter / union if union else 0.0)
    precision = {
        k: sum(1 for v in ious if v > k) / len(ious) for k in PRECISION_THRESHOLDS
    }
    return EvalResult(
        per_sample_iou=ious,
        miou=float(np.mean(ious)),
        oiou=inter_sum / union_sum if union_sum else 0.0,
        precision=precision,
        n=len(ious),
    )


def error_report(result: EvalResult, sample_ids, worst_n: int) -> dict:
    """Worst-``worst_n`` listing sorted by ascending IoU (ties by id).

    Category tallies are emitted empty: assigning failure categories is a
    manual step, the report only fixes the vocabulary.
    """
    if len(sample_ids) != result.n:
        raise ValueError("sample_ids length must match the evaluated sample count")
    if worst_n > result.n:
        raise ValueError(f"worst_n={worst_n} exceeds sample count {result.n}")
    order = sorted(range(result.n), key=lambda i: (result.per_sample_iou[i], sample_ids[i]))
    worst = [
        {"id": sample_ids[i], "iou": result.per_sample_iou[i]} for i in order[:worst_n]
    ]
    categories = {
        key: {
            "description": desc,
            "alias": CATEGORY_ALIASES.get(key),
            "count": 0,
            "sample_ids": [],
        }
        for key, desc in ERROR_CATEGORIES.items()
    }
    return {
        "worst": worst,
        "worst_n": worst_n,
        "zero_iou_count": sum(1 for v in result.per_sample_iou if v == 0.0),
        "categories": categories,
    }


def format_report(report: dict) -> str:
    """Plain-text rendering of an error report."""
    lines = [
        f"worst {report['worst_n']} samples by IoU "
        f"(zero-IoU samples: {report['zero_iou_count']})",
    ]
    for entry in report["worst"]:
        lines.append(f"  {entry['id']}  IoU={entry['iou']:.4f}")
    lines.append("categories (manual annotation):")
    for key, info in report["categories"].items():
        alias = f" / {info['alias']}" if info["alias"] else ""
        lines.append(f"  {key}{alias}: {info['count']}  ({info['description']})")
    return "\n".join(lines)
