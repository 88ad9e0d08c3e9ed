"""Query refinement with per-token deformable sampling around projected 3D reference points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import bilinear_sample

MIN_DEPTH = 0.1


@dataclass
class LanePrediction:
    x: torch.Tensor           # (B, M, N) meters
    z: torch.Tensor           # (B, M, N) meters
    vis_logits: torch.Tensor  # (B, M, N)
    cat_logits: torch.Tensor  # (B, M, C + 1), last column is no-object


@dataclass
class Projection:
    """Ego-frame to feature-pixel projection for a batch: X_cam = R X_ego + t."""

    R: torch.Tensor      # (B, 3, 3)
    t: torch.Tensor      # (B, 3)
    fxy: torch.Tensor    # (B, 2) feature-grid focal lengths
    cxy: torch.Tensor    # (B, 2) feature-grid principal point

    @classmethod
    def from_rigs(cls, rigs, stride: int, dtype=torch.float32) -> "Projection":
        Rs, ts, f, c = [], [], [], []
        for rig in rigs:
            e2c = rig.cam_to_ego.inverse()
            K = rig.intrinsics.scaled(stride)
            Rs.append(e2c.rotation)
            ts.append(e2c.translation)
            f.append([K.fx, K.fy])
            c.append([K.cx, K.cy])
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)
        return cls(t(Rs), t(ts), t(f), t(c))

    def to(self, dtype) -> "Projection":
        return Projection(self.R.to(dtype), self.t.to(dtype), self.fxy.to(dtype), self.cxy.to(dtype))

    def __call__(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, 3) ego points -> (B, T, 2) feature pixels and an in-front mask."""
        X = torch.einsum("bij,btj->bti", self.R, pts) + self.t[:, None, :]
        z = X[..., 2]
        front = z > MIN_DEPTH
        zs = torch.where(front, z, torch.ones_like(z))
        uv = X[..., :2] / zs.unsqueeze(-1) * self.fxy[:, None, :] + self.cxy[:, None, :]
        uv = torch.where(front.unsqueeze(-1), uv, torch.zeros_like(uv))
        return uv, front


class ReferenceInit(nn.Module):
    """Linear head mapping each point-slot query to (x, z); y is the fixed grid."""

    def __init__(self, dim: int, y_grid):
        super().__init__()
        self.head = nn.Linear(dim, 2)
        self.register_buffer("y_grid", torch.as_tensor(y_grid, dtype=torch.float32))

    def forward(self, Q: torch.Tensor) -> torch.Tensor:
        xz = self.head(Q)                                     # (B, M, N, 2)
        y = self.y_grid.to(Q.dtype).expand(*Q.shape[:-1])
        return torch.stack([xz[..., 0], y, xz[..., 1]], dim=-1)


class DecoderLayer(nn.Module):
    """Each of the M*N tokens samples K offsets per head around its projected reference point.

    The gathered message g (value projection -> weighted sum -> output projection,
    then a bias-free FFN on g) is added to the query; a bias-free refinement MLP of
    g moves the reference point in x and z. Zeroed value or output projections make
    the layer an exact identity.
    """

    def __init__(self, dim: int, feat_channels: int, heads: int = 2, points: int = 4, ffn_dim: int = 128):
        super().__init__()
        self.heads, self.points = heads, points
        self.norm = nn.LayerNorm(dim)
        self.offsets = nn.Linear(dim, heads * points * 2)
        self.weights = nn.Linear(dim, heads * points)
        self.value = nn.Conv2d(feat_channels, dim, 1)
        self.out = nn.Linear(dim, dim, bias=False)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim, bias=False), nn.ReLU(), nn.Linear(ffn_dim, dim, bias=False))
        self.refine = nn.Sequential(nn.Linear(dim, dim, bias=False), nn.ReLU(), nn.Linear(dim, 2, bias=False))
        nn.init.zeros_(self.offsets.weight)
        with torch.no_grad():
            # initial offsets: a small ring of K points per head, in feature cells
            ang = torch.arange(heads * points, dtype=torch.float32) * (2 * torch.pi / (heads * points))
            self.offsets.bias.copy_(torch.stack([ang.cos(), ang.sin()], -1).reshape(-1))

    def message(self, Q: torch.Tensor, F_ge: torch.Tensor, ref: torch.Tensor, proj: Projection) -> torch.Tensor:
        B, M, N, d = Q.shape
        T, h, k = M * N, self.heads, self.points
        q = self.norm(Q.reshape(B, T, d))
        uv, front = proj(ref.reshape(B, T, 3))
        off = self.offsets(q).reshape(B, T, h, k, 2)
        w = self.weights(q).reshape(B, T, h, k).softmax(-1)
        loc = uv[:, :, None, None, :] + off                               # (B, T, h, k, 2)
        v = self.value(F_ge)                                              # (B, d, Hf, Wf)
        Hf, Wf = v.shape[-2:]
        v = v.reshape(B * h, d // h, Hf, Wf)
        grid = loc.permute(0, 2, 1, 3, 4).reshape(B * h, T, k, 2)
        s, _ = bilinear_sample(v, grid)                                   # (B*h, d/h, T, k)
        s = s.reshape(B, h, d // h, T, k)
        wt = w.permute(0, 2, 1, 3) * front[:, None, :, None].to(w.dtype)   # (B, h, T, k)
        agg = (s * wt[:, :, None]).sum(-1)                                # (B, h, d/h, T)
        g = self.out(agg.permute(0, 3, 1, 2).reshape(B, T, d))
        return (g + self.ffn(g)).reshape(B, M, N, d)

    def forward(self, Q, F_ge, ref, proj: Projection):
        if ref.shape[:-1] != Q.shape[:-1] or F_ge.shape[0] != Q.shape[0]:
            raise ValueError("query, reference point and feature batch shapes disagree")
        g = self.message(Q, F_ge, ref, proj)
        delta = self.refine(g)
        zero = torch.zeros_like(delta[..., 0])
        new_ref = ref + torch.stack([delta[..., 0], zero, delta[..., 1]], dim=-1)
        return Q + g, new_ref


class LaneHead(nn.Module):
    def __init__(self, dim: int, num_categories: int):
        super().__init__()
        self.xz = nn.Linear(dim, 2)
        self.vis = nn.Linear(dim, 1)
        self.cat = nn.Linear(dim, num_categories + 1)

    def forward(self, Q: torch.Tensor, ref: torch.Tensor) -> LanePrediction:
        xz = self.xz(Q)
        vis = self.vis(Q)[..., 0]
        # visibility-weighted pooling of point-slot queries (uniform when vis logits are 0)
        w = torch.sigmoid(vis)
        pooled = (Q * w.unsqueeze(-1)).sum(2) / w.sum(2, keepdim=True).clamp(min=1e-6)
        return LanePrediction(ref[..., 0] + xz[..., 0], ref[..., 2] + xz[..., 1], vis, self.cat(pooled))


class LaneDecoder(nn.Module):
    def __init__(self, dim: int, feat_channels: int, y_grid, num_categories: int,
                 layers: int = 2, heads: int = 2, points: int = 4, ffn_dim: int = 128):
        super().__init__()
        self.ref_init = ReferenceInit(dim, y_grid)
        self.layers = nn.ModuleList(DecoderLayer(dim, feat_channels, heads, points, ffn_dim) for _ in range(layers))
        self.head = LaneHead(dim, num_categories)

    def forward(self, Q: torch.Tensor, F_ge: torch.Tensor, proj: Projection) -> LanePrediction:
        ref = self.ref_init(Q)
        for layer in self.layers:
            Q, ref = layer(Q, F_ge, ref, proj)
        return self.head(Q, ref)
