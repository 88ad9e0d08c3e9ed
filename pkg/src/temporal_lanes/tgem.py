"""Temporal geometry enhancement: plane-sweep cost volume between frames t-n and t,
turned into a per-channel affine modulation of the current features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import CameraRig, bilinear_sample, relative_pose, warp_grid

INVALID_FILL = 10.0


@dataclass
class CostVolume:
    values: torch.Tensor   # (B, D, H, W), nonnegative
    valid: torch.Tensor    # (B, D, H, W) bool


def check_bins(bins) -> np.ndarray:
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or len(bins) < 2:
        raise ValueError("need at least two depth hypotheses")
    if np.any(bins <= 0) or np.any(np.diff(bins) <= 0):
        raise ValueError("depth hypotheses must be positive and strictly increasing")
    return bins


def sweep_grids(rig_t: CameraRig, rig_src: CameraRig, bins, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature-resolution sampling grids (D, H_f, W_f, 2) into the source frame, plus validity."""
    bins = check_bins(bins)
    K_t = rig_t.intrinsics.scaled(stride)
    K_s = rig_src.intrinsics.scaled(stride)
    T = relative_pose(rig_src, rig_t)
    out = [warp_grid(K_s, K_t, T, d, (K_t.height, K_t.width)) for d in bins]
    return np.stack([g for g, _ in out]), np.stack([v for _, v in out])


def expand_repeat(feats: torch.Tensor, num_bins: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, D, C, H, W) with every depth slice a copy of the input."""
    if num_bins < 2:
        raise ValueError("need at least two depth hypotheses")
    return feats.unsqueeze(1).expand(-1, num_bins, -1, -1, -1)


def warp_expanded(E_src: torch.Tensor, grids: torch.Tensor, grid_valid: torch.Tensor | None = None):
    """Sample every depth slice of E_src (B, D, C, H, W) through grids (B, D, H, W, 2)."""
    B, D, C, H, W = E_src.shape
    if grids.shape[:2] != (B, D):
        raise ValueError(f"grids {tuple(grids.shape)} do not match {D} hypotheses for batch {B}")
    Ho, Wo = grids.shape[2:4]
    out, valid = bilinear_sample(E_src.reshape(B * D, C, H, W), grids.reshape(B * D, Ho, Wo, 2))
    valid = valid.reshape(B, D, Ho, Wo)
    if grid_valid is not None:
        valid = valid & grid_valid
        out = out * valid.reshape(B * D, 1, Ho, Wo).to(out.dtype)
    return out.reshape(B, D, C, Ho, Wo), valid


def cost_volume(E_hat: torch.Tensor, E_t: torch.Tensor, valid: torch.Tensor,
                fill: float = INVALID_FILL) -> CostVolume:
    """Mean-over-channels L1 cost; invalid entries take the per-pixel max of the valid ones."""
    if E_hat.shape != E_t.shape:
        raise ValueError(f"shape mismatch {tuple(E_hat.shape)} vs {tuple(E_t.shape)}")
    raw = (E_hat - E_t).abs().mean(dim=2)
    neg = torch.full_like(raw, -1.0)
    col_max = torch.where(valid, raw, neg).max(dim=1, keepdim=True).values
    col_fill = torch.where(col_max >= 0, col_max, torch.full_like(col_max, fill))
    return CostVolume(torch.where(valid, raw, col_fill.expand_as(raw)), valid)


class TGEM(nn.Module):
    """Cost volume -> geometric features F_g -> (alpha, beta) -> F_ge = alpha * F_t + beta.

    With use_cost_volume=False the geometric branch reads (F_t, masked mean of the
    warped source slices) instead of the volume and its mask.
    """

    def __init__(self, feat_channels: int, num_bins: int, geo_channels: int = 64, use_cost_volume: bool = True):
        super().__init__()
        self.num_bins = num_bins
        self.use_cost_volume = use_cost_volume
        c_in = 2 * num_bins if use_cost_volume else 2 * feat_channels
        self.geo = nn.Sequential(
            nn.Conv2d(c_in, geo_channels, 3, padding=1, bias=False), nn.BatchNorm2d(geo_channels), nn.ReLU(),
            nn.Conv2d(geo_channels, geo_channels, 3, padding=1, bias=False), nn.BatchNorm2d(geo_channels), nn.ReLU(),
        )
        self.alpha = nn.Sequential(nn.Conv2d(geo_channels, feat_channels, 1), nn.BatchNorm2d(feat_channels))
        self.beta = nn.Sequential(nn.Conv2d(geo_channels, feat_channels, 1), nn.BatchNorm2d(feat_channels))

    def geometric_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.geo(x)

    def alpha_beta(self, F_g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.sigmoid(self.alpha(F_g)), torch.relu(self.beta(F_g))

    @staticmethod
    def enhance(F_t: torch.Tensor, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        if not (F_t.shape == alpha.shape == beta.shape):
            raise ValueError("feature and modulation shapes differ")
        return alpha * F_t + beta

    def forward(self, F_t: torch.Tensor, F_src: torch.Tensor, grids: torch.Tensor, grid_valid: torch.Tensor):
        E_hat, valid = warp_expanded(expand_repeat(F_src, self.num_bins), grids, grid_valid)
        if self.use_cost_volume:
            cv = cost_volume(E_hat, expand_repeat(F_t, self.num_bins), valid)
            x = torch.cat([cv.values, valid.to(F_t.dtype)], dim=1)
        else:
            w = valid.to(F_t.dtype).unsqueeze(2)
            warped_mean = (E_hat * w).sum(1) / w.sum(1).clamp(min=1.0)
            x = torch.cat([F_t, warped_mean], dim=1)
        alpha, beta = self.alpha_beta(self.geometric_features(x))
        return self.enhance(F_t, alpha, beta)
