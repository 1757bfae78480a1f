"""Dataset-level evaluation: R@t, FROC, gland malignancy metrics, link accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import DatasetError
from .metrics import (IOU_THRESHOLD, DetectionRecord, MetricError, correct_links, froc_curve,
                      froc_recall_at, gland_scores, malignancy_metrics, match_detections,
                      operating_threshold)
from .predictions import CasePrediction
from .types import VIEWS, CaseAnnotation, ImagePair

DEFAULT_FPIS = (0.25, 0.5, 1.0)
LOG_FPIS = (0.14, 0.25, 0.5, 1.0)
GLAND_OPERATING_FPI = 0.25


def image_id(case_id: str, view: str) -> str:
    return f"{case_id}/{view}"


@dataclass
class EvalReport:
    recall: dict[str, float]
    froc: list[tuple[float, float]]
    roc_auc: float | None
    sensitivity: float | None
    specificity: float | None
    link_accuracy: float
    num_images: int
    num_instances: int
    num_pairs: int
    notes: list[str] = field(default_factory=list)

    def recall_at(self, t: float) -> float:
        return self.recall[format_fpi(t)]

    def to_dict(self) -> dict:
        return asdict(self)


def format_fpi(t: float) -> str:
    return f"{t:g}"


def to_records(predictions: Sequence[CasePrediction], score_floor: float = 0.0) -> list[DetectionRecord]:
    records = []
    for pred in predictions:
        for v in VIEWS:
            for k, inst in enumerate(pred.views[v]):
                if inst.score >= score_floor:
                    records.append(DetectionRecord(image_id(pred.case_id, v), float(inst.score),
                                                   inst.mask, float(inst.malignancy), k))
    return records


def evaluate(predictions: Sequence[CasePrediction], dataset: Sequence[tuple[ImagePair, CaseAnnotation]],
             fpis: Sequence[float] = DEFAULT_FPIS, score_floor: float = 0.0,
             iou_threshold: float = IOU_THRESHOLD) -> EvalReport:
    """Score ``predictions`` against the annotated ``dataset``.

    Every case of the dataset must have a prediction entry (possibly empty).
    Gland malignancy metrics use the detections retained at the R@0.25
    operating threshold; they are reported as ``None`` when every gland has
    the same label.
    """
    by_case = {p.case_id: p for p in predictions}
    missing = [pair.case_id for pair, _ in dataset if pair.case_id not in by_case]
    if missing:
        raise DatasetError(f"no predictions for case(s): {', '.join(missing[:5])}")
    gts, gland_of, labels = {}, {}, {}
    for pair, ann in dataset:
        for v in VIEWS:
            iid = image_id(pair.case_id, v)
            gts[iid] = [inst.mask for inst in ann.view(v)]
            gland_of[iid] = pair.case_id
        labels[pair.case_id] = int(any(i.malignant for v in VIEWS for i in ann.view(v)))

    known = {pair.case_id for pair, _ in dataset}
    records = to_records([p for p in predictions if p.case_id in known], score_floor)
    n_inst = sum(len(g) for g in gts.values())
    notes = []
    curve = froc_curve(records, gts, iou_threshold)
    if n_inst:
        recall = {format_fpi(t): froc_recall_at(curve, t) for t in fpis}
    else:
        recall = {format_fpi(t): float("nan") for t in fpis}
        notes.append("no ground-truth instances: recall undefined")

    auc = sens = spec = None
    threshold = operating_threshold(records, gts, GLAND_OPERATING_FPI, iou_threshold)
    scores = gland_scores(records, gland_of, threshold)
    glands = [pair.case_id for pair, _ in dataset]
    try:
        mm = malignancy_metrics([scores[g] for g in glands], [labels[g] for g in glands])
        auc, sens, spec = mm.roc_auc, mm.sensitivity, mm.specificity
    except MetricError as exc:
        notes.append(f"malignancy metrics skipped: {exc}")

    matched = match_detections(records, gts, iou_threshold)
    lookup = {(r.image_id, r.index): r.matched_gt for r in matched}
    n_correct = n_pairs = 0
    for pair, ann in dataset:
        pred = by_case[pair.case_id]
        cc_m = {k: lookup.get((image_id(pair.case_id, "cc"), k)) for k in range(len(pred.views["cc"]))}
        mlo_m = {k: lookup.get((image_id(pair.case_id, "mlo"), k)) for k in range(len(pred.views["mlo"]))}
        n_correct += correct_links([(i, j) for i, j, _ in pred.links], ann.pair_map, cc_m, mlo_m)
        n_pairs += len(ann.pair_map)

    return EvalReport(recall, curve, auc, sens, spec, n_correct / max(n_pairs, 1),
                      len(gts), n_inst, n_pairs, notes)


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))


def plot_froc(report: EvalReport, path, title: str = "FROC") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [p[0] for p in report.froc]
    ys = [p[1] for p in report.froc]
    fig, ax = plt.subplots(figsize=(4.5, 3.5), dpi=100)
    ax.step(xs, ys, where="post")
    for key, r in report.recall.items():
        ax.plot([float(key)], [r], "o", label=f"R@{key} = {r:.3f}")
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def format_report(report: EvalReport) -> str:
    lines = [f"R@{k}: {v:.4f}" for k, v in report.recall.items()]
    if report.roc_auc is not None:
        lines.append(f"AUC: {report.roc_auc:.4f}  sensitivity: {report.sensitivity:.4f}  "
                     f"specificity: {report.specificity:.4f}")
    lines.append(f"link accuracy: {report.link_accuracy:.4f}")
    lines.extend(f"note: {n}" for n in report.notes)
    return "\n".join(lines)
