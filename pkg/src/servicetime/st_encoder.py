"""Intra-type spatiotemporal encoder.

Each (region, type) look-back window of daily ``[r, d]`` tokens goes through a
temporal self-attention encoder and is pooled to one ``d``-vector. For every
type, a 1-D convolution then runs along the region axis, giving region-local
rows and a region-pooled type summary.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class TemporalEncoder(nn.Module):
    """Transformer encoder over a window of ``T`` tokens of width 2."""

    def __init__(self, d_model: int = 32, heads: int = 4, layers: int = 1, ff_mult: int = 4,
                 pooling: str = "mean", positional: bool = True, max_len: int = 512,
                 dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        if pooling not in ("mean", "last"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.d_model = d_model
        self.pooling = pooling
        self.positional = positional
        self.project = nn.Linear(2, d_model)
        self.register_buffer("pe", sinusoidal_encoding(max_len, d_model).float(), persistent=False)
        layer = nn.TransformerEncoderLayer(d_model, heads, dim_feedforward=ff_mult * d_model,
                                           dropout=dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: ``(..., T, 2)`` -> ``(..., d_model)``."""
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in temporal window")
        lead, T = x.shape[:-2], x.shape[-2]
        z = self.project(x.reshape(-1, T, 2))
        if self.positional:
            z = z + self.pe[:T].to(z.dtype)
        z = self.encoder(z)
        z = z.mean(dim=1) if self.pooling == "mean" else z[:, -1]
        return z.reshape(*lead, self.d_model)

    def bypass(self, x: torch.Tensor) -> torch.Tensor:
        """Projection of the window's mean token; no temporal modelling."""
        return self.project(x.mean(dim=-2))


class RecurrentTemporalEncoder(nn.Module):
    """Single-layer GRU alternative with the same interface."""

    def __init__(self, d_model: int = 32, pooling: str = "last", **_):
        super().__init__()
        self.d_model = d_model
        self.pooling = pooling
        self.project = nn.Linear(2, d_model)
        self.rnn = nn.GRU(d_model, d_model, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in temporal window")
        lead, T = x.shape[:-2], x.shape[-2]
        out, _ = self.rnn(self.project(x.reshape(-1, T, 2)))
        z = out.mean(dim=1) if self.pooling == "mean" else out[:, -1]
        return z.reshape(*lead, self.d_model)

    def bypass(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(x.mean(dim=-2))


class SpatialConv(nn.Module):
    """1-D convolution across regions (in ``region_order``) over ``d`` channels."""

    def __init__(self, channels: int = 32, kernel: int = 3, activation: str = "relu",
                 region_order=None):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel width must be odd")
        self.conv = nn.Conv1d(channels, channels, kernel, padding=kernel // 2)
        self.activation = activation
        if region_order is not None:
            order = torch.as_tensor(list(region_order), dtype=torch.long)
            self.register_buffer("order", order)
            self.register_buffer("inverse", torch.argsort(order))
        else:
            self.order = None

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``h``: ``(B, M, d)`` -> rows ``(B, M, d)`` in region-id order, pooled ``(B, d)``."""
        if h.shape[-2] < 1:
            raise ValueError("need at least one region")
        if self.order is not None:
            h = h[:, self.order]
        z = self.conv(h.transpose(1, 2)).transpose(1, 2)
        if self.activation == "relu":
            z = torch.relu(z)
        elif self.activation == "tanh":
            z = torch.tanh(z)
        elif self.activation != "linear":
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.order is not None:
            z = z[:, self.inverse]
        return z, z.mean(dim=1)


class IntraTypeEncoder(nn.Module):
    """Temporal encoders and spatial convolutions for all ``N`` types.

    Parameters are separate per type unless ``share`` is set.
    """

    def __init__(self, n_types: int, d_model: int = 32, heads: int = 4, layers: int = 1,
                 ff_mult: int = 4, pooling: str = "mean", positional: bool = True,
                 temporal: str = "transformer", kernel: int = 3, activation: str = "relu",
                 region_order=None, share: bool = False):
        super().__init__()
        self.n_types = n_types
        self.share = share

        def make_temporal():
            if temporal == "transformer":
                return TemporalEncoder(d_model, heads, layers, ff_mult, pooling, positional)
            if temporal == "gru":
                return RecurrentTemporalEncoder(d_model, pooling)
            raise ValueError(f"unknown temporal encoder {temporal!r}")

        k = 1 if share else n_types
        self.temporal = nn.ModuleList(make_temporal() for _ in range(k))
        self.spatial = nn.ModuleList(SpatialConv(d_model, kernel, activation, region_order)
                                     for _ in range(k))

    def forward(self, windows: torch.Tensor, temporal: bool = True, spatial: bool = True):
        """``windows``: ``(B, N, M, T, 2)``.

        Returns per-region temporal states ``h`` ``(B, N, M, d)``, spatial rows
        ``(B, N, M, d)`` and pooled type summaries ``(B, N, d)``. With
        ``temporal=False`` windows collapse to their mean token; with
        ``spatial=False`` rows are ``h`` and summaries are region means of ``h``.
        """
        hs, rows, pooled = [], [], []
        for l in range(self.n_types):
            k = 0 if self.share else l
            x = windows[:, l]
            h = self.temporal[k](x) if temporal else self.temporal[k].bypass(x)
            if spatial:
                row, pool = self.spatial[k](h)
            else:
                row, pool = h, h.mean(dim=1)
            hs.append(h)
            rows.append(row)
            pooled.append(pool)
        return torch.stack(hs, 1), torch.stack(rows, 1), torch.stack(pooled, 1)
