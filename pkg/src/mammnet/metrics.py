"""Lesion-detection metrics over mask predictions.

Detections are matched to ground truth greedily in descending score order at
mask IoU > 0.1.  Recall at t false positives per image (R@t) sweeps the score
threshold over every distinct score; FPI counts false positives over all
images, including those with no lesions.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.metrics import roc_auc_score, roc_curve

from .errors import MammNetError, ShapeError

IOU_THRESHOLD = 0.1


class MetricError(MammNetError, ValueError):
    """Raised when a metric is undefined for the given input."""


@dataclass(frozen=True)
class DetectionRecord:
    """One retained query in one image.

    ``index`` is the record's position among its image's detections, used to
    resolve decoded links; ``matched_gt`` is filled in by :func:`match_detections`.
    """

    image_id: str
    score: float
    mask: np.ndarray
    malignancy: float = 0.0
    index: int = -1
    matched_gt: int | None = None

    def __post_init__(self):
        if not 0.0 <= float(self.score) <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a ∩ b| / |a ∪ b|, defined as 0 when both masks are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _score_order(records: Sequence[DetectionRecord]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(records)), key=lambda i: -float(records[i].score))


def match_detections(records: Sequence[DetectionRecord], gts: Mapping[str, Sequence[np.ndarray]],
                     iou_threshold: float = IOU_THRESHOLD) -> list[DetectionRecord]:
    """Greedy score-ordered matching; returns copies with ``matched_gt`` set.

    Each detection, highest score first, takes the unmatched ground truth of
    its image with the largest IoU above ``iou_threshold``.  Output keeps the
    input order.
    """
    taken: dict[str, set[int]] = defaultdict(set)
    out = list(records)
    for i in _score_order(records):
        rec = records[i]
        best, best_iou = None, iou_threshold
        for g, gt in enumerate(gts.get(rec.image_id, ())):
            if g in taken[rec.image_id]:
                continue
            iou = mask_iou(rec.mask, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None:
            taken[rec.image_id].add(best)
        out[i] = replace(rec, matched_gt=best)
    return out


def _num_gts(gts: Mapping[str, Sequence[np.ndarray]]) -> int:
    return sum(len(v) for v in gts.values())


def _num_images(records, gts) -> int:
    return len(set(gts) | {r.image_id for r in records})


def _sweep(records, gts, iou_threshold):
    """Cumulative ``(threshold, fpi, recall)`` after each distinct score, highest first.

    The first entry is the empty-detection point at threshold +inf.
    """
    n_gt = _num_gts(gts)
    n_img = _num_images(records, gts)
    matched = match_detections(records, gts, iou_threshold)
    order = _score_order(matched)
    points = [(np.inf, 0.0, 0.0)]
    tp = fp = 0
    for k, i in enumerate(order):
        rec = matched[i]
        if rec.matched_gt is None:
            fp += 1
        else:
            tp += 1
        last = k + 1 == len(order) or matched[order[k + 1]].score != rec.score
        if last:
            points.append((float(rec.score), fp / max(n_img, 1), tp / n_gt if n_gt else 0.0))
    return points


def recall_at_fpi(records: Sequence[DetectionRecord], gts: Mapping[str, Sequence[np.ndarray]], t: float,
                  iou_threshold: float = IOU_THRESHOLD) -> float:
    """Largest recall over score thresholds whose dataset-wide FPI is at most ``t``.

    ``gts`` maps every evaluated image id to its ground-truth masks (possibly
    none); images present only in ``records`` also count toward FPI.
    """
    if _num_gts(gts) == 0:
        raise MetricError("recall is undefined without ground-truth instances")
    return max(r for _, fpi, r in _sweep(records, gts, iou_threshold) if fpi <= t)


def operating_threshold(records, gts, t: float, iou_threshold: float = IOU_THRESHOLD) -> float:
    """Lowest score threshold whose FPI is at most ``t`` (``inf`` if only the empty set qualifies)."""
    return min(s for s, fpi, _ in _sweep(records, gts, iou_threshold) if fpi <= t)


def froc_curve(records: Sequence[DetectionRecord], gts: Mapping[str, Sequence[np.ndarray]],
               iou_threshold: float = IOU_THRESHOLD) -> list[tuple[float, float]]:
    """FROC staircase as ``(fpi, recall)`` points with strictly increasing FPI.

    Each FPI level carries the best recall reached there; recall is zero
    everywhere when there is no ground truth.
    """
    best: dict[float, float] = {}
    for _, fpi, r in _sweep(records, gts, iou_threshold):
        best[fpi] = max(r, best.get(fpi, 0.0))
    return sorted(best.items())


def froc_recall_at(curve: Sequence[tuple[float, float]], t: float) -> float:
    """Step interpolation of a FROC curve: best recall with FPI ≤ t."""
    return max((r for fpi, r in curve if fpi <= t), default=0.0)


@dataclass(frozen=True)
class MalignancyMetrics:
    roc_auc: float
    sensitivity: float
    specificity: float
    threshold: float


def malignancy_metrics(scores: Sequence[float], labels: Sequence[int]) -> MalignancyMetrics:
    """ROC-AUC (ties count one half) plus sensitivity/specificity at the Youden point."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if np.unique(labels).size < 2:
        raise MetricError("ROC-AUC is undefined when all glands share one label")
    auc = float(roc_auc_score(labels, scores))
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    j = int(np.argmax(tpr - fpr))
    return MalignancyMetrics(auc, float(tpr[j]), float(1.0 - fpr[j]), float(thresholds[j]))


def gland_scores(records: Iterable[DetectionRecord], gland_of: Mapping[str, str], threshold: float) -> dict[str, float]:
    """Per-gland malignancy score: the max over detections scoring at least ``threshold``.

    ``gland_of`` maps each image id to its gland (case) id; glands without a
    retained detection score 0.
    """
    out = {g: 0.0 for g in gland_of.values()}
    for rec in records:
        if rec.score >= threshold:
            g = gland_of[rec.image_id]
            out[g] = max(out[g], float(rec.malignancy))
    return out


def correct_links(links: Iterable[tuple[int, int]], pair_map: Iterable[tuple[int, int]],
                  cc_matches: Mapping[int, int | None], mlo_matches: Mapping[int, int | None]) -> int:
    """Number of ground-truth pairs recovered by decoded ``(cc, mlo)`` detection links."""
    pairs = set(pair_map)
    found = set()
    for i, j in links:
        key = (cc_matches.get(i), mlo_matches.get(j))
        if key in pairs:
            found.add(key)
    return len(found)


def link_accuracy(links, pair_map, cc_matches, mlo_matches) -> float:
    """Correct links over ``max(#gt pairs, 1)`` for one case."""
    return correct_links(links, pair_map, cc_matches, mlo_matches) / max(len(set(pair_map)), 1)
