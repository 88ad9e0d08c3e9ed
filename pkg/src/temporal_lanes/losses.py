"""Bipartite matching and the training losses.

Normalization: x/z and visibility terms are averaged per point within each matched
pair, then over all matched pairs in the batch; the category term is averaged over
every query in the batch; the segmentation term over every feature cell.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .decoder import LanePrediction

NORMALIZATION = "per-point within matched pair, then mean over pairs"


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_preds: list[int] = field(default_factory=list)


@dataclass
class LossBreakdown:
    l_vis: torch.Tensor
    l_x: torch.Tensor
    l_z: torch.Tensor
    l_cate: torch.Tensor
    l_seg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_vis", "l_x", "l_z", "l_cate", "l_seg", "total")}


def _gt_arrays(gt, dtype=np.float64):
    return (np.asarray(gt.x, dtype), np.asarray(gt.z, dtype), np.asarray(gt.visibility, bool), int(gt.category))


def match_cost(x, z, cat_logits, gts, w_cate: float = 10.0, w_x: float = 2.0, w_z: float = 10.0) -> np.ndarray:
    """(M, G) cost: w_cate (1 - p[class]) + w_x mean|dx| + w_z mean|dz| over GT-visible points."""
    x, z = np.asarray(x, np.float64), np.asarray(z, np.float64)
    logits = np.asarray(cat_logits, np.float64)
    prob = np.exp(logits - logits.max(-1, keepdims=True))
    prob /= prob.sum(-1, keepdims=True)
    C = np.zeros((x.shape[0], len(gts)))
    for j, gt in enumerate(gts):
        gx, gz, vis, c = _gt_arrays(gt)
        n = max(int(vis.sum()), 1)
        lx = (np.abs(x - gx) * vis).sum(-1) / n
        lz = (np.abs(z - gz) * vis).sum(-1) / n
        C[:, j] = w_cate * (1.0 - prob[:, c]) + w_x * lx + w_z * lz
    return C


def _lsa_value(C: np.ndarray, rows, cols) -> float:
    if len(rows) == 0 or len(cols) == 0:
        return 0.0
    sub = C[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def assign(C: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment of min(M, G) pairs.

    Among optimal assignments the lexicographically lowest (pred_idx, gt_idx) pair
    list wins: preds are fixed in order, each to the lowest GT that keeps the rest
    of the problem optimal.
    """
    M, G = C.shape
    if M == 0 or G == 0:
        return MatchResult([], list(range(M)))
    rows, cols = list(range(M)), list(range(G))
    pairs = []
    for i in range(M):
        remaining = _lsa_value(C, rows, cols)
        tol = 1e-9 * max(1.0, abs(remaining))
        rest = rows[1:]
        for j in cols:
            others = [c for c in cols if c != j]
            if C[i, j] + _lsa_value(C, rest, others) <= remaining + tol:
                pairs.append((i, j))
                cols = others
                break
        rows = rest
        if not cols:
            break
    matched = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(M) if i not in matched])


def match(pred: LanePrediction, gts, b: int = 0, w_cate=10.0, w_x=2.0, w_z=10.0) -> MatchResult:
    """Match sample `b` of a batched prediction against its GT lanes."""
    M = pred.x.shape[1]
    if len(gts) > M:
        warnings.warn(f"{len(gts)} GT lanes exceed {M} queries; extra lanes stay unmatched")
    if not gts:
        return MatchResult([], list(range(M)))
    with torch.no_grad():
        C = match_cost(pred.x[b].double().numpy(), pred.z[b].double().numpy(),
                       pred.cat_logits[b].double().numpy(), gts, w_cate, w_x, w_z)
    return assign(C)


def _pair_targets(pred, gts_list, matches_list):
    """Gather matched (b, pred_idx) rows and the aligned GT tensors."""
    bs, ps, gx, gz, gv = [], [], [], [], []
    for b, (gts, mr) in enumerate(zip(gts_list, matches_list)):
        for p, g in mr.pairs:
            x, z, vis, _ = _gt_arrays(gts[g])
            bs.append(b); ps.append(p); gx.append(x); gz.append(z); gv.append(vis)
    if not bs:
        return None
    t = lambda a: torch.as_tensor(np.stack(a), dtype=pred.x.dtype)
    return torch.as_tensor(bs), torch.as_tensor(ps), t(gx), t(gz), t(gv)


def loss_xz(pred: LanePrediction, gts_list, matches_list) -> tuple[torch.Tensor, torch.Tensor]:
    tg = _pair_targets(pred, gts_list, matches_list)
    zero = pred.x.sum() * 0.0
    if tg is None:
        return zero, zero
    b, p, gx, gz, vis = tg
    n = vis.sum(-1).clamp(min=1.0)
    has = (vis.sum(-1) > 0).to(vis.dtype)
    npairs = has.sum().clamp(min=1.0)
    lx = (((pred.x[b, p] - gx).abs() * vis).sum(-1) / n).sum() / npairs
    lz = (((pred.z[b, p] - gz).abs() * vis).sum(-1) / n).sum() / npairs
    return lx, lz


def loss_vis(pred: LanePrediction, gts_list, matches_list) -> torch.Tensor:
    tg = _pair_targets(pred, gts_list, matches_list)
    if tg is None:
        return pred.vis_logits.sum() * 0.0
    b, p, _, _, vis = tg
    return F.binary_cross_entropy_with_logits(pred.vis_logits[b, p], vis, reduction="none").mean(-1).mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Softmax focal loss -alpha (1 - p_t)^gamma log p_t, averaged over rows."""
    logp = F.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return (-alpha * (1.0 - logp.exp()) ** gamma * logp).mean()


def category_targets(pred: LanePrediction, gts_list, matches_list) -> torch.Tensor:
    B, M, C1 = pred.cat_logits.shape
    tgt = torch.full((B, M), C1 - 1, dtype=torch.long)
    for b, (gts, mr) in enumerate(zip(gts_list, matches_list)):
        for p, g in mr.pairs:
            tgt[b, p] = int(gts[g].category)
    return tgt


def loss_cate(pred: LanePrediction, gts_list, matches_list, alpha=0.25, gamma=2.0) -> torch.Tensor:
    tgt = category_targets(pred, gts_list, matches_list)
    return focal_loss(pred.cat_logits.reshape(-1, pred.cat_logits.shape[-1]), tgt.reshape(-1), alpha, gamma)


def downsample_seg(seg: torch.Tensor, stride: int = 8) -> torch.Tensor:
    """Max-pool a (B, H, W) mask onto the feature grid.

    Cell j covers pixels [stride*j - stride/2, stride*j + stride/2), matching the
    encoder's cell centers; the last cell also absorbs any remaining border pixels.
    """
    if seg.dim() == 2:
        seg = seg.unsqueeze(0)
    B, H, W = seg.shape
    Hf, Wf = -(-H // stride), -(-W // stride)
    half = stride // 2
    x = seg.to(torch.float32).unsqueeze(1)
    x = F.pad(x, (half, (Wf + 1) * stride - W - half, half, (Hf + 1) * stride - H - half))
    pooled = F.max_pool2d(x, stride, stride)[:, 0]                 # (B, Hf + 1, Wf + 1)
    pooled[:, Hf - 1] = torch.maximum(pooled[:, Hf - 1], pooled[:, Hf])
    pooled[:, :, Wf - 1] = torch.maximum(pooled[:, :, Wf - 1], pooled[:, :, Wf])
    return pooled[:, :Hf, :Wf]


def loss_seg(seg_logits: torch.Tensor, seg_target: torch.Tensor) -> torch.Tensor:
    """Mean BCE over all cells; seg_target is already on the feature grid."""
    logits = seg_logits[:, 0] if seg_logits.dim() == 4 else seg_logits
    if logits.shape != seg_target.shape:
        raise ValueError(f"segmentation shape mismatch {tuple(logits.shape)} vs {tuple(seg_target.shape)}")
    return F.binary_cross_entropy_with_logits(logits, seg_target.to(logits.dtype))


def total_loss(l_vis, l_x, l_z, l_cate, l_seg, w_x=2.0, w_z=10.0, w_cate=10.0, w_seg=5.0) -> LossBreakdown:
    for name, w in (("w_x", w_x), ("w_z", w_z), ("w_cate", w_cate), ("w_seg", w_seg)):
        if w < 0:
            raise ValueError(f"{name} must be nonnegative, got {w}")
    total = l_vis + w_x * l_x + w_z * l_z + w_cate * l_cate + w_seg * l_seg
    return LossBreakdown(l_vis, l_x, l_z, l_cate, l_seg, total)


def compute_losses(pred: LanePrediction, seg_logits: torch.Tensor, gts_list, seg_gt, loss_cfg,
                   stride: int = 8) -> tuple[LossBreakdown, list[MatchResult]]:
    """Match every sample, then evaluate all terms and the weighted total."""
    w = loss_cfg
    matches = [match(pred, gts, b, w.w_cate, w.w_x, w.w_z) for b, gts in enumerate(gts_list)]
    lx, lz = loss_xz(pred, gts_list, matches)
    lv = loss_vis(pred, gts_list, matches)
    lc = loss_cate(pred, gts_list, matches, w.focal_alpha, w.focal_gamma)
    ls = loss_seg(seg_logits, downsample_seg(seg_gt, stride))
    return total_loss(lv, lx, lz, lc, ls, w.w_x, w.w_z, w.w_cate, w.w_seg), matches
