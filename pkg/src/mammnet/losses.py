"""Training objective: Hungarian-matched detection loss, linker loss, malignancy loss.

Detection follows the Mask2Former recipe with dense (not point-sampled) mask
terms: every decoder layer of every view is matched to the ground truth
independently, and matched queries are supervised with class cross-entropy,
mask BCE and mask Dice; unmatched queries learn the no-object class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .config import LossWeights
from .errors import ShapeError
from .linker import LinkPredictionSet
from .types import VIEWS, CaseAnnotation
from .vitd import PredictionSet

LESION, NO_OBJECT = 0, 1


@dataclass
class ViewTarget:
    masks: torch.Tensor        # (G, h, w) float 0/1 at mask-feature resolution
    malignant: torch.Tensor    # (G,) float 0/1

    @property
    def num(self) -> int:
        return int(self.masks.shape[0])


@dataclass
class CaseTarget:
    cc: ViewTarget
    mlo: ViewTarget
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def view(self, name: str) -> ViewTarget:
        return self.cc if name == "cc" else self.mlo


@dataclass
class MatchResult:
    """Injective ground-truth index → query index map and its total cost."""

    assignment: dict[int, int]
    total_cost: float = 0.0

    @property
    def gt_indices(self) -> list[int]:
        return sorted(self.assignment)

    @property
    def pred_indices(self) -> list[int]:
        return [self.assignment[g] for g in self.gt_indices]


@dataclass
class LossBreakdown:
    total: torch.Tensor
    detection: torch.Tensor
    linker: torch.Tensor
    malignancy: torch.Tensor
    matches: list[list[dict[str, MatchResult]]]

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "detection", "linker", "malignancy")}


def downsample_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-downsample a binary mask; a cell is foreground when ≥ half covered.

    Falls back to "any coverage" if that would erase the instance entirely.
    """
    h, w = size
    fy, fx = mask.shape[0] // h, mask.shape[1] // w
    if fy * h != mask.shape[0] or fx * w != mask.shape[1]:
        raise ShapeError(f"mask shape {mask.shape} is not an integer multiple of {size}")
    cover = mask.reshape(h, fy, w, fx).mean(axis=(1, 3))
    small = cover >= 0.5
    if not small.any() and cover.any():
        small = cover > 0
    return small


def prepare_target(annotation: CaseAnnotation, size: tuple[int, int], dtype=torch.float32) -> CaseTarget:
    views = {}
    for v in VIEWS:
        insts = annotation.view(v)
        if insts:
            masks = np.stack([downsample_mask(i.mask, size) for i in insts])
        else:
            masks = np.zeros((0, *size), dtype=bool)
        views[v] = ViewTarget(
            torch.as_tensor(masks, dtype=dtype),
            torch.as_tensor([float(i.malignant) for i in insts], dtype=dtype),
        )
    return CaseTarget(views["cc"], views["mlo"], annotation.sorted_pairs())


def match_cost(class_logits: torch.Tensor, mask_logits: torch.Tensor, gt_masks: torch.Tensor,
               weights: LossWeights = LossWeights()) -> torch.Tensor:
    """(N, G) matching cost: ``w_cls·(−p_lesion) + w_bce·BCE + w_dice·Dice``.

    BCE is the per-pixel mean; Dice is ``1 − (2|p∩t| + s) / (|p| + |t| + s)``
    on sigmoid probabilities with smoothing ``weights.dice_smooth``.
    """
    n = class_logits.shape[0]
    g = gt_masks.shape[0]
    x = mask_logits.reshape(n, -1)
    t = gt_masks.reshape(g, -1).to(x.dtype)
    hw = x.shape[1]
    cls = -class_logits.softmax(-1)[:, LESION:LESION + 1]
    bce = (F.softplus(x).sum(-1, keepdim=True) - x @ t.T) / hw
    p = x.sigmoid()
    s = weights.dice_smooth
    dice = 1 - (2 * (p @ t.T) + s) / (p.sum(-1, keepdim=True) + t.sum(-1)[None] + s)
    return weights.class_weight * cls + weights.bce_weight * bce + weights.dice_weight * dice


def hungarian_match(cost) -> MatchResult:
    """Minimum-total-cost injective assignment of every column (ground truth) to a row."""
    cost = np.asarray(torch.as_tensor(cost).detach().cpu().double())
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, g = cost.shape
    if g > n:
        raise ShapeError(f"{g} ground-truth instances exceed {n} predictions")
    if g == 0:
        return MatchResult({}, 0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    return MatchResult({int(c): int(r) for r, c in zip(rows, cols)}, float(cost[rows, cols].sum()))


def _dice(probs: torch.Tensor, targets: torch.Tensor, smooth: float) -> torch.Tensor:
    num = 2 * (probs * targets).sum(-1) + smooth
    den = probs.sum(-1) + targets.sum(-1) + smooth
    return 1 - num / den


def view_detection_loss(pred: PredictionSet, b: int, target: ViewTarget, match: MatchResult,
                        weights: LossWeights) -> torch.Tensor:
    logits = pred.class_logits[b]
    n = logits.shape[0]
    labels = torch.full((n,), NO_OBJECT, dtype=torch.long, device=logits.device)
    pred_idx = match.pred_indices
    if pred_idx:
        labels[pred_idx] = LESION
    class_w = torch.tensor([1.0, weights.no_object], dtype=logits.dtype, device=logits.device)
    loss = weights.class_weight * F.cross_entropy(logits, labels, weight=class_w)
    if pred_idx:
        x = pred.mask_logits[b, pred_idx].flatten(1)
        t = target.masks[match.gt_indices].flatten(1).to(x.dtype)
        bce = F.binary_cross_entropy_with_logits(x, t, reduction="none").mean(-1).mean()
        dice = _dice(x.sigmoid(), t, weights.dice_smooth).mean()
        loss = loss + weights.bce_weight * bce + weights.dice_weight * dice
    return loss


def joint_match(layer: dict[str, PredictionSet], b: int, target: CaseTarget,
                weights: LossWeights) -> dict[str, MatchResult]:
    """One query per physical object across both views (single-branch decoding).

    Objects are the ground-truth pairs plus every unpaired instance.  The cost
    of a query for an object sums the per-view matching costs; a view where
    the object is absent contributes ``−w_cls·p_no_object`` instead.
    """
    paired_cc = {i for i, _ in target.pairs}
    paired_mlo = {j for _, j in target.pairs}
    objects = list(target.pairs)
    objects += [(i, None) for i in range(target.cc.num) if i not in paired_cc]
    objects += [(None, j) for j in range(target.mlo.num) if j not in paired_mlo]
    n = layer["cc"].class_logits.shape[1]
    if not objects:
        return {v: MatchResult({}, 0.0) for v in VIEWS}
    with torch.no_grad():
        cost = torch.zeros(n, len(objects), dtype=torch.float64)
        for k, v in enumerate(VIEWS):
            pred = layer[v]
            per_gt = match_cost(pred.class_logits[b], pred.mask_logits[b],
                                target.view(v).masks, weights).double()
            absent = -weights.class_weight * pred.class_logits[b].softmax(-1)[:, NO_OBJECT].double()
            for o, obj in enumerate(objects):
                cost[:, o] += per_gt[:, obj[k]] if obj[k] is not None else absent
    joint = hungarian_match(cost)
    out = {}
    for k, v in enumerate(VIEWS):
        assign = {objects[o][k]: q for o, q in joint.assignment.items() if objects[o][k] is not None}
        out[v] = MatchResult(assign, float(sum(cost[q, o] for o, q in joint.assignment.items())))
    return out


def compute_matches(predictions: list[dict[str, PredictionSet]], targets: list[CaseTarget],
                    weights: LossWeights, joint: bool = False) -> list[list[dict[str, MatchResult]]]:
    """``matches[layer][image][view]`` for every decoder layer."""
    out = []
    for layer in predictions:
        per_image = []
        for b, target in enumerate(targets):
            if joint:
                per_image.append(joint_match(layer, b, target, weights))
                continue
            views = {}
            for v in VIEWS:
                pred = layer[v]
                with torch.no_grad():
                    cost = match_cost(pred.class_logits[b], pred.mask_logits[b], target.view(v).masks, weights)
                views[v] = hungarian_match(cost)
            per_image.append(views)
        out.append(per_image)
    return out


def detection_loss(predictions, targets, weights: LossWeights = LossWeights(), matches=None, joint=False):
    """Sum over layers and views of the matched detection loss, averaged over images.

    Returns ``(loss, matches)``; matches are recomputed unless supplied.
    """
    if matches is None:
        matches = compute_matches(predictions, targets, weights, joint)
    total = predictions[0]["cc"].class_logits.new_zeros(())
    for layer, layer_matches in zip(predictions, matches):
        for b, target in enumerate(targets):
            for v in VIEWS:
                total = total + view_detection_loss(layer[v], b, target.view(v), layer_matches[b][v], weights)
    return total / max(len(targets), 1), matches


def malignancy_loss(predictions, targets, matches) -> torch.Tensor:
    """Mean BCE of matched queries' malignancy logits, summed over layers and views."""
    total = predictions[0]["cc"].malignancy_logits.new_zeros(())
    for layer, layer_matches in zip(predictions, matches):
        for b, target in enumerate(targets):
            for v in VIEWS:
                m = layer_matches[b][v]
                if not m.assignment:
                    continue
                logits = layer[v].malignancy_logits[b, m.pred_indices]
                labels = target.view(v).malignant[m.gt_indices].to(logits.dtype)
                total = total + F.binary_cross_entropy_with_logits(logits, labels)
    return total / max(len(targets), 1)


def link_targets(target: CaseTarget, final_match: dict[str, MatchResult]) -> list[tuple[int, int]]:
    """Ground-truth pairs expressed as (cc query, mlo query) via the detection matches."""
    out = []
    for i, j in target.pairs:
        qi = final_match["cc"].assignment.get(i)
        qj = final_match["mlo"].assignment.get(j)
        if qi is not None and qj is not None:
            out.append((qi, qj))
    return out


def image_linker_loss(links: LinkPredictionSet, b: int, pairs: list[tuple[int, int]]):
    """Linker loss for one image given target pairs of query indices.

    Returns ``(loss, MatchResult)`` where the match maps pair index → link query.
    """
    pair_logits = links.pair_logits[b]
    labels = torch.zeros_like(pair_logits)
    if not pairs:
        return F.binary_cross_entropy_with_logits(pair_logits, labels), MatchResult({}, 0.0)
    cc_t = torch.tensor([p[0] for p in pairs])
    mlo_t = torch.tensor([p[1] for p in pairs])
    ce_cc = -links.cc_pointer_logits[b].log_softmax(-1)[:, cc_t]     # (L, K)
    ce_mlo = -links.mlo_pointer_logits[b].log_softmax(-1)[:, mlo_t]
    with torch.no_grad():
        cost = -pair_logits.sigmoid()[:, None] + ce_cc + ce_mlo
    match = hungarian_match(cost)
    link_idx = torch.tensor(match.pred_indices)
    pair_idx = torch.tensor(match.gt_indices)
    labels = labels.index_fill(0, link_idx, 1.0)
    loss = F.binary_cross_entropy_with_logits(pair_logits, labels)
    loss = loss + (ce_cc[link_idx, pair_idx] + ce_mlo[link_idx, pair_idx]).mean()
    return loss, match


def linker_loss(links: LinkPredictionSet | None, targets: list[CaseTarget],
                final_matches: list[dict[str, MatchResult]]) -> torch.Tensor:
    if links is None:
        return torch.zeros(())
    total = links.pair_logits.new_zeros(())
    for b, target in enumerate(targets):
        loss, _ = image_linker_loss(links, b, link_targets(target, final_matches[b]))
        total = total + loss
    return total / max(len(targets), 1)


def combine_losses(detection, linker, malignancy, weights: LossWeights = LossWeights()):
    return weights.lambda_det * detection + weights.lambda_link * linker + weights.lambda_mal * malignancy


def total_loss(output, targets: list[CaseTarget], weights: LossWeights = LossWeights(),
               joint: bool = False) -> LossBreakdown:
    """Full objective for a :class:`~mammnet.model.ModelOutput`.

    The linker's pointer targets come from the final decoder layer's matches.
    """
    det, matches = detection_loss(output.predictions, targets, weights, joint=joint)
    mal = malignancy_loss(output.predictions, targets, matches)
    link = linker_loss(output.links, targets, matches[-1]).to(det.dtype)
    return LossBreakdown(combine_losses(det, link, mal, weights), det, link, mal, matches)
