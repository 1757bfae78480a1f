"""View-interactive transformer decoder.

Each view owns a set of object queries.  A block refines them with masked
attention onto one fused decoder map (scales visited round-robin, lowest
resolution first), self-attention, cross-view inter-attention and an FFN.
Transformer weights are shared by the two views; only the query embeddings
are view specific.  Prediction heads run on the initial queries and after
every block, and each block's predicted masks restrict the next block's
masked attention.

With ``ablation="fpd_only"`` a single joint query branch serves both views:
there is no inter-attention, masked attention reads the concatenation of
both views' maps under the union of the two binarized masks, and a learned
per-view embedding lets the shared heads answer differently per view.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MASK_NEG, MLP, FeedForward, QueryAttention, cell_centers, sine_position_encoding
from .config import ModelConfig
from .fusion import FusedMaps
from .types import VIEWS

DECODER_STRIDES = (32, 16, 8)


@dataclass
class PredictionSet:
    """One view's head outputs for one decoder layer.

    ``class_logits`` (B, N, 2) with index 0 = lesion and 1 = no-object;
    ``malignancy_logits`` (B, N); ``mask_embed`` (B, N, D); ``mask_logits``
    (B, N, H/4, W/4) equal to the inner product of the embeddings with the
    mask feature map.
    """

    class_logits: torch.Tensor
    malignancy_logits: torch.Tensor
    mask_embed: torch.Tensor
    mask_logits: torch.Tensor

    def lesion_prob(self) -> torch.Tensor:
        return self.class_logits.softmax(-1)[..., 0]


@dataclass
class VITDOutput:
    predictions: list[dict[str, PredictionSet]]
    queries: dict[str, torch.Tensor]


def scale_schedule(num_blocks: int) -> list[int]:
    """Decoder-map stride consumed by each block, e.g. 32, 16, 8, 32, ..."""
    return [DECODER_STRIDES[i % len(DECODER_STRIDES)] for i in range(num_blocks)]


def _foreground(prev_mask_logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    resized = F.interpolate(prev_mask_logits, size=size, mode="bilinear", align_corners=False)
    return (resized >= 0).flatten(2)


def _additive(foreground: torch.Tensor, dtype) -> torch.Tensor:
    mask = torch.full(foreground.shape, MASK_NEG, dtype=dtype, device=foreground.device)
    mask = mask.masked_fill(foreground, 0.0)
    empty = ~foreground.any(dim=-1, keepdim=True)
    return mask.masked_fill(empty, 0.0)


def compute_attention_mask(prev_mask_logits: torch.Tensor, target_resolution: tuple[int, int]) -> torch.Tensor:
    """Additive (B, N, h·w) mask: 0 where the resized previous mask is foreground.

    Logits are bilinearly resized to ``target_resolution`` and binarized at 0
    (probability 0.5).  Background gets :data:`MASK_NEG`.  A row with no
    foreground at all is reset to zeros so that query attends everywhere.
    """
    prev = prev_mask_logits.detach()
    return _additive(_foreground(prev, target_resolution), prev.dtype)


def union_attention_mask(cc_mask_logits: torch.Tensor, mlo_mask_logits: torch.Tensor,
                         target_resolution: tuple[int, int]) -> torch.Tensor:
    fg = (_foreground(cc_mask_logits.detach(), target_resolution)
          | _foreground(mlo_mask_logits.detach(), target_resolution))
    return _additive(fg, cc_mask_logits.dtype)


class MaskedAttention(QueryAttention):
    """``X + W_o · softmax(M + Q Kᵀ / √d) V`` with ``Q = f_Q(X)`` and K, V from a decoder map."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__(dim, num_heads, norm_memory=False)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, inter: bool = True):
        super().__init__()
        self.masked_attn = MaskedAttention(dim, num_heads)
        self.self_attn = QueryAttention(dim, num_heads)
        self.inter_attn = QueryAttention(dim, num_heads) if inter else None
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, states: dict[str, torch.Tensor], memories: dict[str, tuple[torch.Tensor, torch.Tensor]],
                masks: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        mid = {}
        for v, x in states.items():
            memory, pos = memories[v]
            x = self.masked_attn(x, memory, mask=masks[v], memory_pos=pos)
            mid[v] = self.self_attn(x, x)
        if self.inter_attn is not None:
            # both directions read the same post-self-attention snapshot
            mid = {"cc": self.inter_attn(mid["cc"], mid["mlo"]),
                   "mlo": self.inter_attn(mid["mlo"], mid["cc"])}
        return {v: self.ffn(x) for v, x in mid.items()}


class PredictionHeads(nn.Module):
    def __init__(self, dim: int, mask_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.class_head = nn.Linear(dim, 2)
        self.malignancy_head = nn.Linear(dim, 1)
        self.mask_embed = MLP(dim, dim, mask_dim, 3)

    def forward(self, x: torch.Tensor, mask_features: torch.Tensor) -> PredictionSet:
        h = self.norm(x)
        embed = self.mask_embed(h)
        masks = torch.einsum("bnd,bdhw->bnhw", embed, mask_features)
        return PredictionSet(self.class_head(h), self.malignancy_head(h).squeeze(-1), embed, masks)


class VITD(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.joint = cfg.ablation == "fpd_only"
        branches = ("joint",) if self.joint else VIEWS
        self.query_feat = nn.ParameterDict(
            {name: nn.Parameter(torch.randn(cfg.num_object_queries, c)) for name in branches}
        )
        self.level_embed = nn.Parameter(torch.randn(len(DECODER_STRIDES), c))
        if self.joint:
            self.view_embed = nn.Parameter(0.1 * torch.randn(len(VIEWS), c))
        self.blocks = nn.ModuleList(
            DecoderBlock(c, cfg.num_heads, cfg.ffn_dim, inter=not self.joint)
            for _ in range(cfg.num_vitd_blocks)
        )
        self.heads = PredictionHeads(c, cfg.mask_dim)

    def _predict(self, states, mask_features) -> dict[str, PredictionSet]:
        if self.joint:
            x = states["joint"]
            return {v: self.heads(x + self.view_embed[i], mask_features[v]) for i, v in enumerate(VIEWS)}
        return {v: self.heads(states[v], mask_features[v]) for v in VIEWS}

    def _memory(self, fmap: torch.Tensor, level: int):
        h, w = fmap.shape[-2:]
        pos = sine_position_encoding(cell_centers(h, w, fmap.dtype, fmap.device), fmap.shape[1])
        return fmap.flatten(2).transpose(1, 2), pos + self.level_embed[level]

    def forward(self, fused: FusedMaps) -> VITDOutput:
        batch = fused.mask_features["cc"].shape[0]
        states = {k: q.unsqueeze(0).expand(batch, -1, -1) for k, q in self.query_feat.items()}
        predictions = [self._predict(states, fused.mask_features)]
        for i, block in enumerate(self.blocks):
            level = i % len(DECODER_STRIDES)
            mems = {v: self._memory(fused.decoder_maps[v][level], level) for v in VIEWS}
            size = tuple(fused.decoder_maps["cc"][level].shape[-2:])
            prev = predictions[-1]
            if self.joint:
                union = union_attention_mask(prev["cc"].mask_logits, prev["mlo"].mask_logits, size)
                memory = torch.cat([mems["cc"][0], mems["mlo"][0]], dim=1)
                pos = torch.cat([mems["cc"][1], mems["mlo"][1]], dim=0)
                memories = {"joint": (memory, pos)}
                masks = {"joint": torch.cat([union, union], dim=-1)}
            else:
                memories = mems
                masks = {v: compute_attention_mask(prev[v].mask_logits, size) for v in VIEWS}
            states = block(states, memories, masks)
            predictions.append(self._predict(states, fused.mask_features))
        return VITDOutput(predictions, states)
