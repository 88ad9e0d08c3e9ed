"""Temporal instance-aware query generation.

Queries are built from the current frame, the past frame and a synthetic future
view (a crop-and-magnify of the current image), then fused with 1x1 convolutions.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .geometry import CameraRig, CropRect, bilinear_sample, crop_sampling_grid, zoom_intrinsics

SOURCES = ("current", "past", "future")


@dataclass
class QuerySet:
    values: torch.Tensor   # (B, M, N, d)
    source_tag: str


def crop_rect(crop, height: int, width: int) -> CropRect:
    """Pixel rectangle from fractional crop settings (x0, y0, width, height)."""
    return CropRect(crop.x0 * width, crop.y0 * height, crop.width * width, crop.height * height)


def make_synthetic_future(images: torch.Tensor, rig: CameraRig | None, crop: CropRect):
    """Crop `crop` out of (B, C, H, W) images and resize bilinearly back to (H, W).

    Returns the magnified images and the rig with zoomed intrinsics (pose unchanged).
    """
    H, W = images.shape[-2:]
    grid = torch.as_tensor(crop_sampling_grid(crop, (H, W)), dtype=images.dtype)
    grid = grid.unsqueeze(0).expand(images.shape[0], -1, -1, -1)
    out, _ = bilinear_sample(images, grid)
    new_rig = None
    if rig is not None:
        new_rig = rig.with_intrinsics(zoom_intrinsics(rig.intrinsics, crop, (H, W)))
    return out, new_rig


class InstanceEmbed(nn.Module):
    """M attention maps over the feature grid; each pools F into one d-dim instance embedding."""

    def __init__(self, feat_channels: int, num_queries: int, dim: int):
        super().__init__()
        self.maps = nn.Sequential(
            nn.Conv2d(feat_channels, feat_channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(feat_channels, num_queries, 1),
        )
        self.proj = nn.Linear(feat_channels, dim)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        attn = self.maps(feats).flatten(2).softmax(dim=-1)            # (B, M, HW)
        pooled = torch.einsum("bmp,bcp->bmc", attn, feats.flatten(2))
        return self.proj(pooled)                                      # (B, M, d)


def compose_queries(Q_l: torch.Tensor, Q_p: torch.Tensor) -> torch.Tensor:
    """Broadcast sum: (B, M, d) + (N, d) -> (B, M, N, d)."""
    if Q_l.shape[-1] != Q_p.shape[-1]:
        raise ValueError(f"dimension mismatch {Q_l.shape[-1]} vs {Q_p.shape[-1]}")
    return Q_l[:, :, None, :] + Q_p[None, None, :, :]


class CrossAttend(nn.Module):
    """q <- q + a + FFN(a), where a is multi-head attention of q over all kv tokens.

    The FFN has no biases, so a zeroed attention output projection makes the block
    an exact identity on q.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim, bias=False), nn.ReLU(), nn.Linear(ffn_dim, dim, bias=False))

    def message(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """Pre-residual output for (B, M, N, d) tensors."""
        if q.shape[-1] != kv.shape[-1]:
            raise ValueError("query and key/value dimensions differ")
        B, M, N, d = q.shape
        qt, kvt = q.reshape(B, M * N, d), kv.reshape(B, -1, d)
        a, _ = self.attn(qt, kvt, kvt, need_weights=False)
        return (a + self.ffn(a)).reshape(B, M, N, d)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        return q + self.message(q, kv)


class Aggregate(nn.Module):
    """Concat(Q_t, Q_past, Q_future) -> h = W1 x; Q = h + W2 relu(h) (1x1 convs over the M x N grid)."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Linear(3 * dim, dim)
        self.conv2 = nn.Linear(dim, dim)

    def set_identity(self) -> None:
        """Select the Q_t block exactly."""
        d = self.conv2.in_features
        with torch.no_grad():
            self.conv1.weight.zero_()
            self.conv1.weight[:, :d] = torch.eye(d)
            self.conv1.bias.zero_()
            self.conv2.weight.zero_()
            self.conv2.bias.zero_()

    def forward(self, Q_t, Q_past, Q_future) -> torch.Tensor:
        if not (Q_t.shape == Q_past.shape == Q_future.shape):
            raise ValueError("query sets must share a shape")
        h = self.conv1(torch.cat([Q_t, Q_past, Q_future], dim=-1))
        return h + self.conv2(torch.relu(h))


class TIQG(nn.Module):
    def __init__(self, feat_channels: int, num_queries: int, num_points: int, dim: int,
                 heads: int = 2, ffn_dim: int = 128, use_temporal: bool = True):
        super().__init__()
        self.use_temporal = use_temporal
        self.instance = InstanceEmbed(feat_channels, num_queries, dim)   # shared across sources
        self.point_embed = nn.ParameterDict(
            {s: nn.Parameter(torch.randn(num_points, dim) * 0.1) for s in SOURCES})
        self.ca_past = CrossAttend(dim, heads, ffn_dim)
        self.ca_future = CrossAttend(dim, heads, ffn_dim)
        self.aggregate = Aggregate(dim)

    def queries(self, feats: torch.Tensor, source: str) -> QuerySet:
        return QuerySet(compose_queries(self.instance(feats), self.point_embed[source]), source)

    def forward(self, F_t: torch.Tensor, F_past: torch.Tensor | None = None,
                F_future: torch.Tensor | None = None) -> QuerySet:
        Q_t = self.queries(F_t, "current").values
        if not self.use_temporal:
            return QuerySet(Q_t, "current")
        Q_past = self.ca_past(self.queries(F_past, "past").values, Q_t)
        Q_fut = self.ca_future(self.queries(F_future, "future").values, Q_t)
        return QuerySet(self.aggregate(Q_t, Q_past, Q_fut), "fused")

