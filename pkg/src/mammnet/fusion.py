"""Fusion pixel decoder: cross-view feature fusion with deformable attention.

At the two lowest resolutions (strides 32 and 16) each view's map attends to a
small set of points sampled from the other view's map.  The points start on a
uniform grid (one per ``r × r`` cell of the reference map) and are shifted by
offsets predicted from the querying view.  Higher resolutions use independent
per-view 1×1 convolutions; all scales are merged top-down FPN style.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import cell_centers, multi_head_attention, sine_position_encoding
from .config import ModelConfig
from .errors import ShapeError
from .types import VIEWS


@dataclass
class FusedMaps:
    """Per-view decoder maps at strides 32, 16, 8 and mask features at stride 4."""

    decoder_maps: dict[str, list[torch.Tensor]]
    mask_features: dict[str, torch.Tensor]


def uniform_reference_points(h: int, w: int, r: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Cell centers of a ``ceil(h/r) × ceil(w/r)`` grid, as ``(P, 2)`` normalized ``(x, y)``.

    >>> uniform_reference_points(4, 4, 4).tolist()
    [[0.5, 0.5]]
    """
    if h < 1 or w < 1:
        raise ShapeError(f"reference map must have positive size, got {h}x{w}")
    if r < 1:
        raise ShapeError(f"downsample factor must be >= 1, got {r}")
    return cell_centers(math.ceil(h / r), math.ceil(w / r), dtype=dtype, device=device)


def effective_downsample(h: int, w: int, r: int) -> int:
    """Largest factor ≤ ``r`` that still leaves at least two grid cells per axis.

    With one reference point the attention softmax is constant and the query
    and key projections receive no gradient, which happens on the coarsest
    maps of small inputs.
    """
    return max(1, min(r, min(h, w) // 2))


def bilinear_sample(feature_map: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample ``feature_map`` (B, C, h, w) at normalized ``points`` (B, P, 2) or (P, 2).

    Pixel ``(i, j)`` sits at ``((j + 0.5) / w, (i + 0.5) / h)``; coordinates
    outside the outermost centers clamp to the border.  Returns (B, P, C).
    """
    b, c, h, w = feature_map.shape
    if points.dim() == 2:
        points = points.expand(b, -1, -1)
    p = points.clamp(0.0, 1.0)
    x = (p[..., 0] * w - 0.5).clamp(0, w - 1)
    y = (p[..., 1] * h - 0.5).clamp(0, h - 1)
    x0 = x.detach().floor().long()
    y0 = y.detach().floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(1)
    fy = (y - y0.to(y.dtype)).unsqueeze(1)

    flat = feature_map.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(-1, c, -1)
        return flat.gather(2, idx)

    out = (gather(y0, x0) * (1 - fx) * (1 - fy)
           + gather(y0, x1) * fx * (1 - fy)
           + gather(y1, x0) * (1 - fx) * fy
           + gather(y1, x1) * fx * fy)
    return out.transpose(1, 2)


class OffsetNetwork(nn.Module):
    """Predicts one (dx, dy) per reference point, shared across heads.

    Input is the main map average-pooled onto the reference grid, i.e. a
    summary of the queries around each reference location.  The last layer
    starts at zero, so an untrained network leaves the grid undeformed.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, 2)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, main_map: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(main_map, grid_hw)
        summary = pooled.flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(self.fc1(summary)))


def predict_offsets(offset_net: OffsetNetwork, main_map: torch.Tensor, grid: torch.Tensor,
                    grid_hw: tuple[int, int]):
    """Return ``(offsets, deformed_points)`` with deformed points clamped to [0, 1]²."""
    offsets = offset_net(main_map, grid_hw)
    deformed = (grid.unsqueeze(0) + offsets).clamp(0.0, 1.0)
    return offsets, deformed


class FusionLayer(nn.Module):
    """Deformable cross-attention from a main map onto a reference map.

    Queries are all ``h1·w1`` positions of the main map; keys and values are
    features bilinearly sampled from the reference map at the deformed points.
    A residual connection adds the main map back.
    """

    def __init__(self, dim: int, num_heads: int, downsample: int):
        super().__init__()
        self.num_heads = num_heads
        self.downsample = downsample
        self.norm_q = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.offset_net = OffsetNetwork(dim)
        self.last_weights = None
        self.last_points = None

    def reference_grid(self, h: int, w: int, dtype=torch.float32, device=None):
        """Undeformed reference points for an ``h × w`` reference map, plus the grid size."""
        r = effective_downsample(h, w, self.downsample)
        grid_hw = (math.ceil(h / r), math.ceil(w / r))
        return uniform_reference_points(h, w, r, dtype=dtype, device=device), grid_hw

    def forward(self, main_map: torch.Tensor, reference_map: torch.Tensor) -> torch.Tensor:
        b, c, h1, w1 = main_map.shape
        if reference_map.shape[:2] != (b, c):
            raise ShapeError(
                f"main map {tuple(main_map.shape)} and reference map "
                f"{tuple(reference_map.shape)} differ in batch or channel size"
            )
        h2, w2 = reference_map.shape[-2:]
        grid, grid_hw = self.reference_grid(h2, w2, main_map.dtype, main_map.device)
        _, points = predict_offsets(self.offset_net, main_map, grid, grid_hw)
        sampled = bilinear_sample(reference_map, points)

        queries = main_map.flatten(2).transpose(1, 2)
        query_pos = sine_position_encoding(cell_centers(h1, w1, main_map.dtype, main_map.device), c)
        q = self.q_proj(self.norm_q(queries) + query_pos)
        k = self.k_proj(sampled + sine_position_encoding(points, c))
        v = self.v_proj(sampled)
        out, weights = multi_head_attention(q, k, v, self.num_heads)
        self.last_weights = weights.detach()
        self.last_points = points.detach()
        out = queries + self.out_proj(out)
        return out.transpose(1, 2).reshape(b, c, h1, w1)


class FuseBlock(nn.Module):
    """Two directional fusion layers, each followed by concat + 1×1 conv."""

    def __init__(self, dim: int, num_heads: int, downsample: int):
        super().__init__()
        self.fusion = nn.ModuleDict({v: FusionLayer(dim, num_heads, downsample) for v in VIEWS})
        self.merge = nn.ModuleDict({v: nn.Conv2d(2 * dim, dim, 1) for v in VIEWS})

    def forward(self, cc_map: torch.Tensor, mlo_map: torch.Tensor):
        if cc_map.shape != mlo_map.shape:
            raise ShapeError(f"cc map {tuple(cc_map.shape)} and mlo map {tuple(mlo_map.shape)} differ")
        cc_fused = self.fusion["cc"](cc_map, mlo_map)
        mlo_fused = self.fusion["mlo"](mlo_map, cc_map)
        cc_out = self.merge["cc"](torch.cat([cc_map, cc_fused], dim=1))
        mlo_out = self.merge["mlo"](torch.cat([mlo_map, mlo_fused], dim=1))
        return cc_out, mlo_out


def _conv_norm_act(cin: int, cout: int, k: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(),
    )


class FusionPixelDecoder(nn.Module):
    """Turns two backbone pyramids into :class:`FusedMaps`.

    With ``fuse=False`` the fuse blocks are absent and each view's low
    resolution maps pass through unchanged, giving two independent decoders.
    """

    def __init__(self, backbone_channels, dim: int, mask_dim: int, num_heads: int,
                 downsample: int, fuse: bool = True):
        super().__init__()
        c4, c8, c16, c32 = backbone_channels
        self.fuse = fuse
        self.proj32 = nn.Conv2d(c32, dim, 1)
        self.proj16 = nn.Conv2d(c16, dim, 1)
        if fuse:
            self.fuse32 = FuseBlock(dim, num_heads, downsample)
            self.fuse16 = FuseBlock(dim, num_heads, downsample)
        self.lateral8 = nn.ModuleDict({v: nn.Conv2d(c8, dim, 1) for v in VIEWS})
        self.lateral4 = nn.ModuleDict({v: nn.Conv2d(c4, dim, 1) for v in VIEWS})
        self.out32 = _conv_norm_act(dim, dim)
        self.out16 = _conv_norm_act(dim, dim)
        self.out8 = _conv_norm_act(dim, dim)
        self.mask_head = nn.Sequential(_conv_norm_act(dim, dim), nn.Conv2d(dim, mask_dim, 1))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "FusionPixelDecoder":
        return cls(cfg.backbone_channels, cfg.embed_dim, cfg.mask_dim, cfg.num_heads,
                   cfg.fusion_downsample, fuse=cfg.ablation != "vitd_only")

    def forward(self, cc_pyramid, mlo_pyramid) -> FusedMaps:
        pyramids = {"cc": cc_pyramid, "mlo": mlo_pyramid}
        for v, pyr in pyramids.items():
            if len(pyr) != 4:
                raise ShapeError(f"{v} pyramid must have 4 maps, got {len(pyr)}")
        l32 = {v: self.proj32(p[3]) for v, p in pyramids.items()}
        l16 = {v: self.proj16(p[2]) for v, p in pyramids.items()}
        if self.fuse:
            l32["cc"], l32["mlo"] = self.fuse32(l32["cc"], l32["mlo"])
            l16["cc"], l16["mlo"] = self.fuse16(l16["cc"], l16["mlo"])

        decoder_maps, mask_features = {}, {}
        for v, pyr in pyramids.items():
            p32 = l32[v]
            p16 = l16[v] + _upsample_to(p32, l16[v])
            lat8 = self.lateral8[v](pyr[1])
            p8 = lat8 + _upsample_to(p16, lat8)
            lat4 = self.lateral4[v](pyr[0])
            p4 = lat4 + _upsample_to(p8, lat4)
            decoder_maps[v] = [self.out32(p32), self.out16(p16), self.out8(p8)]
            mask_features[v] = self.mask_head(p4)
        return FusedMaps(decoder_maps, mask_features)


def pixel_decode(decoder: FusionPixelDecoder, cc_pyramid, mlo_pyramid) -> FusedMaps:
    return decoder(cc_pyramid, mlo_pyramid)


def _upsample_to(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, size=like.shape[-2:], mode="nearest")
