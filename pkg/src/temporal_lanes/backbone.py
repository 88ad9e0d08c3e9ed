"""Small stride-8 convolutional encoder with an auxiliary lane-segmentation head."""
from __future__ import annotations

import torch
import torch.nn as nn


def conv_bn_relu(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=False),
    )


class Backbone(nn.Module):
    """Four conv-BN-ReLU blocks; three stride-2 blocks give cell j centered on pixel 8j.

    Output spatial size is ceil(H / 8) x ceil(W / 8).
    """

    stride = 8

    def __init__(self, in_channels: int = 3, feat_channels: int = 64):
        super().__init__()
        self.in_channels = in_channels
        widths = [max(feat_channels // 4, 4), max(feat_channels // 2, 4), feat_channels, feat_channels]
        self.blocks = nn.Sequential(
            conv_bn_relu(in_channels, widths[0], 2),
            conv_bn_relu(widths[0], widths[1], 2),
            conv_bn_relu(widths[1], widths[2], 2),
            conv_bn_relu(widths[2], widths[3], 1),
        )
        self.seg = nn.Conv2d(feat_channels, 1, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {images.shape[1]}")
        return self.blocks(images)

    def seg_head(self, feats: torch.Tensor) -> torch.Tensor:
        """One segmentation logit per feature cell, shape (B, 1, H_f, W_f)."""
        return self.seg(feats)
