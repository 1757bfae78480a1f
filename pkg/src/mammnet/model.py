"""End-to-end dual-view network: backbone → fusion pixel decoder → VITD → linker."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import Backbone
from .config import ModelConfig
from .fusion import FusedMaps, FusionPixelDecoder
from .linker import LesionLinker, LinkPredictionSet
from .rng import torch_seeded
from .vitd import VITD, PredictionSet


@dataclass
class ModelOutput:
    predictions: list[dict[str, PredictionSet]]
    links: LinkPredictionSet | None
    queries: dict[str, torch.Tensor]
    fused: FusedMaps

    @property
    def final(self) -> dict[str, PredictionSet]:
        return self.predictions[-1]


class MammNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone.from_config(cfg)
        self.pixel_decoder = FusionPixelDecoder.from_config(cfg)
        self.vitd = VITD(cfg)
        self.linker = LesionLinker(cfg) if cfg.ablation != "fpd_only" else None

    def forward(self, cc: torch.Tensor, mlo: torch.Tensor) -> ModelOutput:
        """``cc``/``mlo``: (B, 1, H, W) batches with H, W divisible by 32."""
        batch = cc.shape[0]
        pyramid = self.backbone(torch.cat([cc, mlo], dim=0))
        cc_pyr = [p[:batch] for p in pyramid]
        mlo_pyr = [p[batch:] for p in pyramid]
        fused = self.pixel_decoder(cc_pyr, mlo_pyr)
        decoded = self.vitd(fused)
        links = None
        if self.linker is not None:
            links = self.linker(decoded.queries["cc"], decoded.queries["mlo"])
        return ModelOutput(decoded.predictions, links, decoded.queries, fused)


def build_model(cfg: ModelConfig, seed: int = 0) -> MammNet:
    """Construct a model whose initial weights depend only on ``(cfg, seed)``."""
    with torch_seeded(seed):
        return MammNet(cfg)


def parameter_registry(model: nn.Module) -> dict[str, tuple[int, ...]]:
    """Name → shape of every registered parameter."""
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


# Parameter-name prefixes each ablation removes from (or adds to) the full model.
FUSION_LAYER_PREFIXES = ("pixel_decoder.fuse32.", "pixel_decoder.fuse16.")
INTER_ATTENTION_MARKER = ".inter_attn."
LINKER_PREFIX = "linker."


def ablation_registry_diff(full: nn.Module, ablated: nn.Module) -> tuple[set[str], set[str]]:
    """``(removed, added)`` parameter names going from ``full`` to ``ablated``."""
    a, b = set(parameter_registry(full)), set(parameter_registry(ablated))
    return a - b, b - a


def documented_ablation_diff(full: nn.Module, mode: str) -> tuple[set[str], set[str]]:
    """The parameter-name diff each ablation mode is documented to produce.

    ``vitd_only`` removes both fuse blocks of the pixel decoder.
    ``fpd_only`` removes every inter-attention layer, the whole linker and the
    two per-view query embeddings, and adds one joint query embedding plus a
    two-row view embedding.
    """
    names = set(parameter_registry(full))
    if mode == "full":
        return set(), set()
    if mode == "vitd_only":
        return {n for n in names if n.startswith(FUSION_LAYER_PREFIXES)}, set()
    if mode == "fpd_only":
        removed = {n for n in names
                   if INTER_ATTENTION_MARKER in n or n.startswith(LINKER_PREFIX)
                   or n in ("vitd.query_feat.cc", "vitd.query_feat.mlo")}
        return removed, {"vitd.query_feat.joint", "vitd.view_embed"}
    raise ValueError(f"unknown ablation mode {mode!r}")
