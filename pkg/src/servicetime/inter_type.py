"""Multi-head self-attention across the per-type summaries."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class InterTypeOutput:
    e_inter: torch.Tensor  # (B, N, d)
    attention_weights: torch.Tensor  # (B, N, N), head-averaged, rows sum to 1


class InterTypeAttention(nn.Module):
    """Unmasked attention over ``N`` type rows with a residual connection.

    No positional information is attached to types, so the map is permutation
    equivariant over rows.
    """

    def __init__(self, d_model: int = 32, hidden: int = 64, heads: int = 4, layer_norm: bool = True):
        super().__init__()
        if hidden % heads:
            raise ValueError(f"hidden={hidden} not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = hidden // heads
        self.q = nn.Linear(d_model, hidden)
        self.k = nn.Linear(d_model, hidden)
        self.v = nn.Linear(d_model, hidden)
        self.out = nn.Linear(hidden, d_model)
        self.norm = nn.LayerNorm(d_model) if layer_norm else nn.Identity()

    def forward(self, e_bar: torch.Tensor) -> InterTypeOutput:
        """``e_bar``: ``(B, N, d)`` or ``(N, d)``."""
        squeeze = e_bar.dim() == 2
        if squeeze:
            e_bar = e_bar[None]
        B, N, _ = e_bar.shape
        if N == 0:
            raise ValueError("need at least one type")

        def split(t):
            return t.view(B, N, self.heads, self.head_dim).transpose(1, 2)  # (B, H, N, hd)

        q, k, v = split(self.q(e_bar)), split(self.k(e_bar)), split(self.v(e_bar))
        scores = q @ k.transpose(-1, -2) / self.head_dim**0.5
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, N, -1)
        out = self.norm(e_bar + self.out(ctx))
        weights = attn.mean(dim=1)
        if squeeze:
            out, weights = out[0], weights[0]
        return InterTypeOutput(out, weights)


def encode_inter_type(e_bar: torch.Tensor, params: InterTypeAttention) -> InterTypeOutput:
    return params(e_bar)
