"""Training loop, batched prediction and single-pair inference."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ABLATIONS, LossWeights, ModelConfig, TrainConfig, config_to_dict
from .datagen import augment
from .errors import ConfigError, DatasetError, TrainingDivergedError
from .evaluation import LOG_FPIS, EvalReport, evaluate
from .linker import decode_links
from .losses import prepare_target, total_loss
from .model import MammNet, build_model
from .predictions import CasePrediction, InstancePrediction
from .types import VIEWS, CaseAnnotation, ImagePair

log = logging.getLogger(__name__)

Case = tuple[ImagePair, CaseAnnotation]
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.jsonl"


def image_tensors(pairs: Sequence[ImagePair]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack image pairs into two (B, 1, H, W) float32 batches."""
    cc = torch.from_numpy(np.stack([np.asarray(p.cc_image, dtype=np.float32) for p in pairs]))[:, None]
    mlo = torch.from_numpy(np.stack([np.asarray(p.mlo_image, dtype=np.float32) for p in pairs]))[:, None]
    return cc, mlo


def _mask_size(shape: tuple[int, int]) -> tuple[int, int]:
    return shape[0] // 4, shape[1] // 4


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Stream for one optimization step; depends only on ``(seed, step)`` so resumes replay exactly."""
    return np.random.default_rng([seed, step])


def sample_batch(dataset: Sequence[Case], batch_size: int, rng: np.random.Generator,
                 flags: dict[str, bool]) -> list[Case]:
    idx = rng.choice(len(dataset), size=min(batch_size, len(dataset)), replace=False)
    batch = [dataset[int(i)] for i in idx]
    if any(flags.values()):
        batch = [augment(pair, ann, rng, flags) for pair, ann in batch]
    return batch


@dataclass
class TrainResult:
    model: MammNet
    step: int
    losses: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    evals: list[dict] = field(default_factory=list)


def _eval_record(model, step, eval_data, train_cfg, recent):
    report = evaluate_model(model, eval_data, LOG_FPIS, train_cfg.score_floor, train_cfg.pair_threshold)
    return {
        "step": step,
        "loss": recent,
        **{f"R@{k}": v for k, v in report.recall.items()},
        "auc": report.roc_auc,
        "link_accuracy": report.link_accuracy,
    }


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Sequence[Case],
          ablation: str | None = None, out_dir=None, resume=None,
          eval_data: Sequence[Case] | None = None,
          callback: Callable[[int, dict], bool | None] | None = None) -> TrainResult:
    """Optimize a model on ``dataset`` for ``train_cfg.max_steps`` steps.

    ``ablation`` overrides ``model_cfg.ablation``.  With ``out_dir`` set, a
    checkpoint is written every ``checkpoint_every`` steps and at the end,
    and every evaluation appends one JSON line to ``metrics.jsonl``.
    ``resume`` continues from a checkpoint, keeping its step counter and
    optimizer state.  ``callback(step, losses)`` runs after every step and
    may return True to stop early.  Raises :class:`TrainingDivergedError` on a
    non-finite loss.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if ablation is not None:
        if ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
        model_cfg = dataclasses.replace(model_cfg, ablation=ablation)
    shape = dataset[0][0].shape
    if shape != (model_cfg.image_size, model_cfg.image_size):
        log.warning("dataset images are %s, model config says %d", shape, model_cfg.image_size)

    model = build_model(model_cfg, seed=train_cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                 weight_decay=train_cfg.weight_decay)
    step = 0
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_config=model_cfg)
        model.load_state_dict(ckpt.state_dict)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        step = ckpt.step

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    joint = model_cfg.ablation == "fpd_only"
    mask_hw = _mask_size(shape)
    flags = train_cfg.augment_flags
    result = TrainResult(model, step)
    last_finite = None
    window: list[float] = []
    ckpt_path = None
    t0 = time.time()

    def checkpoint():
        nonlocal ckpt_path
        if out is not None:
            ckpt_path = save_checkpoint(out / CHECKPOINT_NAME, model, step, model_cfg, train_cfg, optimizer)

    def run_eval():
        if eval_data is None:
            return
        recent = float(np.mean(window)) if window else None
        record = _eval_record(model, step, eval_data, train_cfg, recent)
        result.evals.append(record)
        if out is not None:
            with open(out / METRICS_NAME, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        model.train()

    model.train()
    while step < train_cfg.max_steps:
        batch = sample_batch(dataset, train_cfg.batch_size, step_rng(train_cfg.seed, step), flags)
        cc, mlo = image_tensors([p for p, _ in batch])
        targets = [prepare_target(ann, mask_hw) for _, ann in batch]
        optimizer.zero_grad(set_to_none=True)
        output = model(cc, mlo)
        losses = total_loss(output, targets, train_cfg.loss, joint=joint)
        value = float(losses.total.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(step, last_finite)
        losses.total.backward()
        optimizer.step()
        last_finite = value
        step += 1
        result.losses.append(value)
        window.append(value)
        stop = callback is not None and callback(step, losses.as_floats()) is True
        if step % 100 == 0:
            log.info("step %d loss %.4f (%.2f s/step)", step, value, (time.time() - t0) / len(result.losses))
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            checkpoint()
        if train_cfg.eval_every and step % train_cfg.eval_every == 0:
            run_eval()
            window = []
        if stop:
            break

    checkpoint()
    if eval_data is not None and (not result.evals or result.evals[-1]["step"] != step):
        run_eval()
    result.step = step
    result.checkpoint = ckpt_path
    model.eval()
    return result


# ---------------------------------------------------------------------------
# prediction


def _upsample(mask_logits: torch.Tensor, size: tuple[int, int]) -> np.ndarray:
    up = F.interpolate(mask_logits[None], size=size, mode="bilinear", align_corners=False)[0]
    return (up.sigmoid() >= 0.5).numpy()


def output_to_predictions(model: MammNet, output, case_ids: Sequence[str], image_size: tuple[int, int],
                          score_floor: float = 0.05, pair_threshold: float = 0.5) -> list[CasePrediction]:
    """Convert a batched forward pass into per-case predictions.

    Queries whose lesion probability reaches ``score_floor`` are kept, with
    masks upsampled to ``image_size`` (bilinear, then thresholded at 0.5).
    Links come from the linker; in ``fpd_only`` mode a query kept in both
    views with probability ≥ ``pair_threshold`` links to itself.
    """
    final = output.final
    preds = []
    for b, case_id in enumerate(case_ids):
        pred = CasePrediction(case_id)
        position = {}
        for v in VIEWS:
            probs = final[v].lesion_prob()[b]
            malig = final[v].malignancy_logits[b].sigmoid()
            keep = torch.nonzero(probs >= score_floor).flatten().tolist()
            masks = _upsample(final[v].mask_logits[b, keep], image_size) if keep else []
            position[v] = {}
            for k, q in enumerate(keep):
                position[v][q] = len(pred.views[v])
                pred.views[v].append(InstancePrediction(masks[k], float(probs[q]), float(malig[q]), q))
        if output.links is not None:
            links = decode_links(output.links.pair_logits[b], output.links.cc_pointer[b],
                                 output.links.mlo_pointer[b], pair_threshold)
        else:
            p_cc, p_mlo = final["cc"].lesion_prob()[b], final["mlo"].lesion_prob()[b]
            both = torch.nonzero((p_cc >= pair_threshold) & (p_mlo >= pair_threshold)).flatten().tolist()
            links = [(q, q, float(torch.sqrt(p_cc[q] * p_mlo[q]))) for q in both]
        pred.links = [(position["cc"][i], position["mlo"][j], s) for i, j, s in links
                      if i in position["cc"] and j in position["mlo"]]
        preds.append(pred)
    return preds


@torch.no_grad()
def predict(model: MammNet, pairs: Sequence[ImagePair], batch_size: int = 5, score_floor: float = 0.05,
            pair_threshold: float = 0.5) -> list[CasePrediction]:
    was_training = model.training
    model.eval()
    preds = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        cc, mlo = image_tensors(chunk)
        output = model(cc, mlo)
        preds.extend(output_to_predictions(model, output, [p.case_id for p in chunk], chunk[0].shape,
                                           score_floor, pair_threshold))
    model.train(was_training)
    return preds


@torch.no_grad()
def dataset_loss(model: MammNet, dataset: Sequence[Case], weights=None, batch_size: int = 5) -> float:
    """Mean total loss over ``dataset`` without augmentation, in eval mode."""
    weights = weights or LossWeights()
    was_training = model.training
    model.eval()
    joint = model.config.ablation == "fpd_only"
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        cc, mlo = image_tensors([p for p, _ in chunk])
        targets = [prepare_target(a, _mask_size(chunk[0][0].shape)) for _, a in chunk]
        total += float(total_loss(model(cc, mlo), targets, weights, joint=joint).total) * len(chunk)
        count += len(chunk)
    model.train(was_training)
    return total / max(count, 1)


def evaluate_model(model: MammNet, dataset: Sequence[Case], fpis=LOG_FPIS, score_floor: float = 0.05,
                   pair_threshold: float = 0.5) -> EvalReport:
    preds = predict(model, [p for p, _ in dataset], score_floor=score_floor, pair_threshold=pair_threshold)
    return evaluate(preds, dataset, fpis)


def load_model(checkpoint_path, expected_config: ModelConfig | None = None) -> MammNet:
    ckpt = load_checkpoint(checkpoint_path, expected_config)
    model = MammNet(ckpt.model_config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def infer(model_or_checkpoint, pair: ImagePair, score_floor: float = 0.05, pair_threshold: float = 0.5,
          expected_config: ModelConfig | None = None) -> CasePrediction:
    """Predict instances and links for one pair; masks come back at input resolution."""
    model = model_or_checkpoint
    if not isinstance(model, MammNet):
        model = load_model(model_or_checkpoint, expected_config)
    return predict(model, [pair], 1, score_floor, pair_threshold)[0]


_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                     [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.float64)


def render_overlay(image: np.ndarray, masks: Sequence[np.ndarray], alpha: float = 0.45) -> np.ndarray:
    """RGB uint8 overlay of instance masks on a [0, 1] grayscale image."""
    rgb = np.repeat(np.clip(np.asarray(image, dtype=np.float64), 0, 1)[..., None] * 255.0, 3, axis=-1)
    for k, mask in enumerate(masks):
        m = np.asarray(mask, dtype=bool)
        rgb[m] = (1 - alpha) * rgb[m] + alpha * _PALETTE[k % len(_PALETTE)]
    return np.round(rgb).astype(np.uint8)


def train_summary(result: TrainResult) -> dict:
    return {
        "step": result.step,
        "first_loss": result.losses[0] if result.losses else None,
        "last_loss": result.losses[-1] if result.losses else None,
        "model_config": config_to_dict(result.model.config),
        "checkpoint": str(result.checkpoint) if result.checkpoint else None,
    }
