"""Lesion linker: link queries that pair CC objects with MLO objects.

Each link query is refined by a small DETR-style decoder over the two views'
final object queries, then emits a pair-presence logit and one pointer
distribution over each view's object queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .attention import FeedForward, QueryAttention
from .config import ModelConfig


@dataclass
class LinkPredictionSet:
    """``pair_logits`` (B, L); pointer logits (B, L, N) per view; ``embeddings`` (B, L, C)."""

    pair_logits: torch.Tensor
    cc_pointer_logits: torch.Tensor
    mlo_pointer_logits: torch.Tensor
    embeddings: torch.Tensor

    @property
    def cc_pointer(self) -> torch.Tensor:
        return self.cc_pointer_logits.softmax(-1)

    @property
    def mlo_pointer(self) -> torch.Tensor:
        return self.mlo_pointer_logits.softmax(-1)


class LinkBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = QueryAttention(dim, num_heads)
        self.cross_attn = QueryAttention(dim, num_heads)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, links, memory):
        links = self.self_attn(links, links)
        links = self.cross_attn(links, memory)
        return self.ffn(links)


class LesionLinker(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.link_queries = nn.Parameter(torch.randn(cfg.num_link_queries, c))
        # tells the cross-attention which view a memory row came from
        self.memory_view_embed = nn.Parameter(0.1 * torch.randn(2, c))
        self.blocks = nn.ModuleList(
            LinkBlock(c, cfg.num_heads, cfg.ffn_dim) for _ in range(cfg.num_link_blocks)
        )
        self.norm = nn.LayerNorm(c)
        self.object_norm = nn.LayerNorm(c)
        self.pair_head = nn.Linear(c, 1)
        self.pointer_query = nn.ModuleDict({v: nn.Linear(c, c) for v in ("cc", "mlo")})
        self.pointer_key = nn.ModuleDict({v: nn.Linear(c, c) for v in ("cc", "mlo")})

    def forward(self, x_cc: torch.Tensor, x_mlo: torch.Tensor) -> LinkPredictionSet:
        batch = x_cc.shape[0]
        memory = torch.cat([x_cc + self.memory_view_embed[0], x_mlo + self.memory_view_embed[1]], dim=1)
        links = self.link_queries.unsqueeze(0).expand(batch, -1, -1)
        for block in self.blocks:
            links = block(links, memory)
        h = self.norm(links)
        scale = 1.0 / math.sqrt(h.shape[-1])
        pointers = {}
        for v, objects in (("cc", x_cc), ("mlo", x_mlo)):
            keys = self.pointer_key[v](self.object_norm(objects))
            pointers[v] = self.pointer_query[v](h) @ keys.transpose(1, 2) * scale
        return LinkPredictionSet(self.pair_head(h).squeeze(-1), pointers["cc"], pointers["mlo"], links)


def link_forward(linker: LesionLinker, x_cc, x_mlo) -> LinkPredictionSet:
    return linker(x_cc, x_mlo)


def decode_links(pair_logits, cc_pointer, mlo_pointer, pair_threshold: float = 0.5):
    """Turn one image's link outputs into ``[(cc_index, mlo_index, score), ...]``.

    Links whose pair probability reaches ``pair_threshold`` point at the
    argmax of each pointer distribution; repeated ``(cc, mlo)`` pairs keep
    their highest score.  Output is sorted by descending score.
    """
    scores = torch.as_tensor(pair_logits).detach().float().sigmoid()
    cc_idx = torch.as_tensor(cc_pointer).detach().argmax(-1)
    mlo_idx = torch.as_tensor(mlo_pointer).detach().argmax(-1)
    best: dict[tuple[int, int], float] = {}
    for score, i, j in zip(scores.tolist(), cc_idx.tolist(), mlo_idx.tolist()):
        if score >= pair_threshold:
            key = (int(i), int(j))
            best[key] = max(score, best.get(key, -1.0))
    return sorted(((i, j, s) for (i, j), s in best.items()), key=lambda t: (-t[2], t[0], t[1]))
