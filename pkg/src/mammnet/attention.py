"""Attention primitives shared by the fusion layers, the query decoder and the linker."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

# Additive attention-mask value for excluded keys.  Finite so that a fully
# masked row cannot produce NaN before the empty-mask fallback is applied.
MASK_NEG = -1e9


def sine_position_encoding(points: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Encode normalized ``(x, y)`` coordinates into ``dim`` sin/cos channels.

    ``points`` has shape ``(..., 2)`` with values in [0, 1]; the result has
    shape ``(..., dim)``: the first half encodes y, the second half x.
    """
    quarter = dim // 4
    freq = temperature ** (torch.arange(quarter, dtype=points.dtype, device=points.device) / quarter)
    x = points[..., 0:1] * (2 * math.pi) / freq
    y = points[..., 1:2] * (2 * math.pi) / freq
    return torch.cat([y.sin(), y.cos(), x.sin(), x.cos()], dim=-1)


def cell_centers(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Row-major ``(h*w, 2)`` cell-center coordinates ``(x, y)`` in [0, 1]."""
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def multi_head_attention(q, k, v, num_heads: int, mask=None):
    """Scaled dot-product attention over ``num_heads`` heads.

    ``q``: (B, Nq, C); ``k``/``v``: (B, Nk, C); ``mask``: additive (B, Nq, Nk)
    or None.  Returns ``(output (B, Nq, C), weights (B, heads, Nq, Nk))``.
    """
    b, nq, c = q.shape
    nk = k.shape[1]
    d = c // num_heads
    qh = q.reshape(b, nq, num_heads, d).transpose(1, 2)
    kh = k.reshape(b, nk, num_heads, d).transpose(1, 2)
    vh = v.reshape(b, nk, num_heads, d).transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d)
    if mask is not None:
        scores = scores + mask[:, None]
    weights = scores.softmax(dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(b, nq, c)
    return out, weights


class QueryAttention(nn.Module):
    """Pre-norm multi-head attention with a residual connection.

    ``forward(x, memory)`` returns ``x + W_o · attn(f_Q(x), f_K(memory), f_V(memory))``.
    Used as self-attention (``memory=x``), as cross-view inter-attention and
    as the linker's cross-attention.  The output projection carries no bias,
    so zeroing ``v_proj`` leaves exactly the residual.
    """

    def __init__(self, dim: int, num_heads: int, norm_memory: bool = True):
        super().__init__()
        self.num_heads = num_heads
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if norm_memory else nn.Identity()
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.last_weights = None

    def forward(self, x, memory, mask=None, query_pos=None, memory_pos=None):
        q_in = self.norm_q(x)
        kv = self.norm_kv(memory)
        q = self.q_proj(q_in if query_pos is None else q_in + query_pos)
        k = self.k_proj(kv if memory_pos is None else kv + memory_pos)
        v = self.v_proj(kv)
        out, weights = multi_head_attention(q, k, v, self.num_heads, mask)
        self.last_weights = weights.detach()
        return x + self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return x + self.fc2(F.relu(self.fc1(self.norm(x))))


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, layers: int = 3):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x
