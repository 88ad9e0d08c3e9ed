"""Full temporal lane detector: backbone -> TGEM -> TIQG -> decoder -> head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone
from .config import RunConfig
from .decoder import LaneDecoder, LanePrediction, Projection
from .tgem import TGEM, sweep_grids
from .tiqg import TIQG, crop_rect, make_synthetic_future


@dataclass
class Batch:
    images_t: torch.Tensor      # (B, 3, H, W)
    images_src: torch.Tensor    # (B, 3, H, W) frame t-n
    grids: torch.Tensor         # (B, D, H_f, W_f, 2) sweep grids into frame t-n
    grid_valid: torch.Tensor    # (B, D, H_f, W_f) bool
    proj: Projection
    seg_gt: torch.Tensor | None = None   # (B, H, W) uint8
    lanes: list | None = None            # per-sample list of Lane3D

    def to(self, dtype) -> "Batch":
        return Batch(self.images_t.to(dtype), self.images_src.to(dtype), self.grids.to(dtype),
                     self.grid_valid, self.proj.to(dtype), self.seg_gt, self.lanes)


def make_batch(pairs, cfg: RunConfig) -> Batch:
    """Collate (frame_src, frame_t) FrameSample pairs."""
    bins = cfg.depth_bins()
    stride = cfg.model.stride
    imgs_t, imgs_s, grids, valids, segs, lanes, rigs = [], [], [], [], [], [], []
    for f_src, f_t in pairs:
        g, v = sweep_grids(f_t.rig, f_src.rig, bins, stride)
        imgs_t.append(f_t.image.transpose(2, 0, 1))
        imgs_s.append(f_src.image.transpose(2, 0, 1))
        grids.append(g)
        valids.append(v)
        segs.append(f_t.seg_gt)
        lanes.append(f_t.lanes_gt)
        rigs.append(f_t.rig)
    return Batch(
        torch.from_numpy(np.stack(imgs_t).astype(np.float32)),
        torch.from_numpy(np.stack(imgs_s).astype(np.float32)),
        torch.from_numpy(np.stack(grids).astype(np.float32)),
        torch.from_numpy(np.stack(valids)),
        Projection.from_rigs(rigs, stride),
        torch.from_numpy(np.stack(segs)),
        lanes,
    )


class LaneNet(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        m, ab = cfg.model, cfg.ablation
        self.cfg = cfg
        self.backbone = Backbone(3, m.feat_channels)
        self.tgem = TGEM(m.feat_channels, m.num_depth_bins, m.geo_channels, ab.use_cost_volume) if ab.use_tgem else None
        self.tiqg = TIQG(m.feat_channels, m.num_queries, len(cfg.y_grid), m.query_dim, m.attn_heads, m.ffn_dim,
                         use_temporal=ab.use_tiqg_temporal)
        self.decoder = LaneDecoder(m.query_dim, m.feat_channels, cfg.y_grid, cfg.num_categories,
                                   m.decoder_layers, m.attn_heads, m.sampling_points, m.ffn_dim)
        self.crop = crop_rect(m.crop, cfg.sim.image_height, cfg.sim.image_width)

    def forward(self, batch: Batch) -> tuple[LanePrediction, torch.Tensor]:
        """Returns the lane prediction and (B, 1, H_f, W_f) segmentation logits."""
        B = batch.images_t.shape[0]
        temporal = self.tiqg.use_temporal
        ims = [batch.images_t]
        if self.tgem is not None or temporal:
            ims.append(batch.images_src)
        if temporal:
            ims.append(make_synthetic_future(batch.images_t, None, self.crop)[0])
        feats = self.backbone(torch.cat(ims)).split(B)
        F_t = feats[0]
        Q = self.tiqg(F_t, feats[1], feats[2]) if temporal else self.tiqg(F_t)
        F_ge = F_t if self.tgem is None else self.tgem(F_t, feats[1], batch.grids, batch.grid_valid)
        pred = self.decoder(Q.values, F_ge, batch.proj)
        return pred, self.backbone.seg_head(F_t)
