"""Prediction interchange file.

Predictions reuse the dataset manifest conventions (inline RLE masks) with
scores added, so evaluation can run on output from any model::

    {"format": "mammnet-predictions", "version": 1, "image_size": [H, W],
     "cases": [{"case_id": "case_0000",
                "instances": [{"view": "cc", "rle": [...], "score": 0.93,
                               "malignancy": 0.71}, ...],
                "links": [{"cc": 0, "mlo": 1, "score": 0.88}, ...]}]}

Link indices refer to the position of an instance among the instances of the
same view in that case, in file order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import _field, rle_decode, rle_encode
from .errors import DatasetError, MalformedMaskError
from .types import VIEWS, CaseAnnotation

PREDICTION_FORMAT = "mammnet-predictions"
PREDICTION_VERSION = 1


@dataclass(frozen=True)
class InstancePrediction:
    mask: np.ndarray
    score: float
    malignancy: float
    query_index: int = -1


@dataclass
class CasePrediction:
    case_id: str
    views: dict[str, list[InstancePrediction]] = field(default_factory=lambda: {v: [] for v in VIEWS})
    links: list[tuple[int, int, float]] = field(default_factory=list)


def oracle_predictions(case_id: str, annotation: CaseAnnotation) -> CasePrediction:
    """Ground truth rewritten as perfect-confidence predictions."""
    views = {v: [InstancePrediction(i.mask.copy(), 1.0, float(i.malignant)) for i in annotation.view(v)]
             for v in VIEWS}
    links = [(i, j, 1.0) for i, j in annotation.sorted_pairs()]
    return CasePrediction(case_id, views, links)


def write_predictions(path, predictions: list[CasePrediction], image_size: tuple[int, int]) -> None:
    cases = []
    for pred in predictions:
        instances = [
            {"view": v, "rle": rle_encode(p.mask), "score": float(p.score),
             "malignancy": float(p.malignancy), "query_index": int(p.query_index)}
            for v in VIEWS for p in pred.views[v]
        ]
        links = [{"cc": int(i), "mlo": int(j), "score": float(s)} for i, j, s in pred.links]
        cases.append({"case_id": pred.case_id, "instances": instances, "links": links})
    doc = {"format": PREDICTION_FORMAT, "version": PREDICTION_VERSION,
           "image_size": [int(image_size[0]), int(image_size[1])], "cases": cases}
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc))
    except OSError as exc:
        raise DatasetError(f"cannot write predictions {path}: {exc}") from exc


def _number(obj, key, where, lo=0.0, hi=1.0):
    value = _field(obj, key, (int, float), where)
    if not lo <= value <= hi:
        raise DatasetError(f"schema error: field '{where}{key}' = {value} outside [{lo}, {hi}]")
    return float(value)


def read_predictions(path) -> list[CasePrediction]:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing prediction file: {path}")
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse predictions {path}: {exc}") from exc
    fmt = _field(doc, "format", str, "")
    if fmt != PREDICTION_FORMAT:
        raise DatasetError(f"schema error: field 'format' is {fmt!r}, expected {PREDICTION_FORMAT!r}")
    if _field(doc, "version", int, "") != PREDICTION_VERSION:
        raise DatasetError(f"prediction file version {doc['version']} unsupported")
    size = _field(doc, "image_size", list, "")
    if len(size) != 2 or not all(isinstance(s, int) and s > 0 for s in size):
        raise DatasetError("schema error: field 'image_size' must be two positive integers")
    out = []
    for c, case in enumerate(_field(doc, "cases", list, "")):
        where = f"cases[{c}]."
        pred = CasePrediction(_field(case, "case_id", str, where))
        for k, inst in enumerate(_field(case, "instances", list, where)):
            at = f"{where}instances[{k}]."
            view = _field(inst, "view", str, at)
            if view not in VIEWS:
                raise DatasetError(f"schema error: field '{at}view' must be 'cc' or 'mlo', got {view!r}")
            try:
                mask = rle_decode(_field(inst, "rle", list, at), tuple(size))
            except MalformedMaskError as exc:
                raise MalformedMaskError(f"{at}rle: {exc}") from exc
            pred.views[view].append(InstancePrediction(
                mask, _number(inst, "score", at), _number(inst, "malignancy", at),
                int(inst.get("query_index", -1))))
        for k, link in enumerate(case.get("links", [])):
            at = f"{where}links[{k}]."
            i, j = _field(link, "cc", int, at), _field(link, "mlo", int, at)
            if not (0 <= i < len(pred.views["cc"]) and 0 <= j < len(pred.views["mlo"])):
                raise DatasetError(f"schema error: '{at}' points at a missing instance ({i}, {j})")
            pred.links.append((i, j, _number(link, "score", at)))
        out.append(pred)
    return out
