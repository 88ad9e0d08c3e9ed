"""Independent reference implementations shared by the unit and acceptance tests."""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from temporal_lanes import scene_sim as S
from temporal_lanes.geometry import (CameraRig, CropRect, Pose, bilinear_sample, crop_sampling_grid, pixel_grid,
                                     project_points, relative_pose, warp_grid)
from temporal_lanes.decoder import LanePrediction
from temporal_lanes.lanes import Lane3D
from temporal_lanes.metrics import MetricsReport
from temporal_lanes.tgem import cost_volume, expand_repeat, sweep_grids, warp_expanded

Y_GRID = np.linspace(3.0, 103.0, 20)
NUM_CLASSES = 3


# ---------------------------------------------------------------- matching

def all_assignments(M: int, G: int):
    """Every one-to-one pairing of min(M, G) preds with GTs, as sorted pair lists."""
    k = min(M, G)
    for preds in itertools.combinations(range(M), k):
        for gts in itertools.permutations(range(G), k):
            yield list(zip(preds, gts))


def brute_assign(C: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Minimum cost by enumeration; ties broken by the lexicographically smallest pair list."""
    M, G = C.shape
    scored = [(math.fsum(C[i, j] for i, j in p), p) for p in all_assignments(M, G)]
    best = min(s for s, _ in scored)
    tol = 1e-9 * max(1.0, abs(best))
    best_pairs = min(p for s, p in scored if s <= best + tol)
    return best, best_pairs


def prediction_from_lanes(lanes, M, conf=50.0) -> LanePrediction:
    """Predictions that reproduce `lanes` in the first slots with confident logits; the rest are no-object."""
    x = torch.zeros(1, M, len(Y_GRID), dtype=torch.float64)
    z = torch.zeros_like(x)
    vis = torch.full_like(x, -conf)
    cat = torch.full((1, M, NUM_CLASSES + 1), -conf, dtype=torch.float64)
    cat[0, :, NUM_CLASSES] = conf
    for m, lane in enumerate(lanes):
        x[0, m] = torch.as_tensor(lane.x)
        z[0, m] = torch.as_tensor(lane.z)
        vis[0, m] = torch.as_tensor(np.where(lane.visibility, conf, -conf))
        cat[0, m] = -conf
        cat[0, m, lane.category] = conf
    return LanePrediction(x, z, vis, cat)


# ---------------------------------------------------------------- lane metric

def report_dict(r: MetricsReport) -> dict:
    d = r.to_dict()
    d.pop("version")
    d.pop("tags")
    return d


def random_lane(rng, n=len(Y_GRID), category=None) -> Lane3D:
    x = rng.uniform(-8, 8) + rng.uniform(-0.02, 0.02) * Y_GRID
    z = rng.uniform(-0.5, 0.5) + rng.normal(scale=0.05, size=n)
    vis = np.ones(n, bool)
    a, b = sorted(rng.integers(0, n + 1, size=2))
    if rng.uniform() < 0.5 and b - a >= 2:
        vis[:] = False
        vis[a:b] = True
    cat = int(rng.integers(0, 3)) if category is None else category
    return Lane3D(np.stack([x, Y_GRID, z], -1), vis, cat)


def perturbed(rng, lane: Lane3D, scale: float) -> Lane3D:
    xyz = lane.xyz.copy()
    xyz[:, 0] += rng.normal(scale=scale, size=len(xyz))
    xyz[:, 2] += rng.normal(scale=scale / 4, size=len(xyz))
    vis = lane.visibility.copy()
    flip = rng.uniform(size=len(vis)) < 0.1
    vis[flip] = ~vis[flip]
    cat = lane.category if rng.uniform() < 0.8 else int(rng.integers(0, 3))
    return Lane3D(xyz, vis, cat)


def random_frame(rng, max_lanes=5):
    gts = [random_lane(rng) for _ in range(int(rng.integers(0, max_lanes + 1)))]
    preds = [perturbed(rng, g, rng.choice([0.2, 1.0, 2.0])) for g in gts if rng.uniform() < 0.8]
    while len(preds) < max_lanes and rng.uniform() < 0.4:
        preds.append(random_lane(rng))
    preds = preds[:max_lanes]
    order = rng.permutation(len(preds))
    return [preds[i] for i in order], gts


def brute_evaluate(frames, threshold=1.5, ratio=0.75) -> dict:
    """Pooled metrics with per-frame matching by enumeration of all partial one-to-one matchings."""
    matched = num_pred = num_gt = cat_ok = 0
    errs = {k: [] for k in ("x_near", "x_far", "z_near", "z_far")}
    for preds, gts in frames:
        num_pred += len(preds)
        num_gt += len(gts)
        flag, dist = {}, {}
        for i, p in enumerate(preds):
            for j, g in enumerate(gts):
                both = p.visibility & g.visibility
                if not both.any():
                    continue
                d = [math.hypot(p.x[k] - g.x[k], p.z[k] - g.z[k]) for k in np.flatnonzero(both)]
                if sum(di < threshold for di in d) >= ratio * len(d):
                    flag[i, j] = True
                    dist[i, j] = math.fsum(d) / len(d)
        best_key, best = None, []
        edges = list(flag)
        for r in range(min(len(preds), len(gts)), -1, -1):
            for combo in itertools.combinations(edges, r):
                if len({i for i, _ in combo}) < r or len({j for _, j in combo}) < r:
                    continue
                key = (-r, math.fsum(dist[e] for e in combo))
                if best_key is None or key < best_key:
                    best_key, best = key, list(combo)
            if best_key is not None and best_key[0] == -r:
                break
        matched += len(best)
        for i, j in best:
            p, g = preds[i], gts[j]
            cat_ok += p.category == g.category
            for k in range(len(g.y)):
                if p.visibility[k] and g.visibility[k]:
                    side = "near" if g.y[k] <= 40.0 else "far"
                    errs["x_" + side].append(abs(p.x[k] - g.x[k]))
                    errs["z_" + side].append(abs(p.z[k] - g.z[k]))
    P = matched / num_pred if num_pred else 0.0
    R = matched / num_gt if num_gt else 0.0
    mean = lambda v: math.fsum(v) / len(v) if v else 0.0
    return {"f1": 2 * P * R / (P + R) if P + R > 0 else 0.0, "precision": P, "recall": R,
            "category_accuracy": cat_ok / matched if matched else 0.0,
            "x_err_near": mean(errs["x_near"]), "x_err_far": mean(errs["x_far"]),
            "z_err_near": mean(errs["z_near"]), "z_err_far": mean(errs["z_far"]),
            "matched": matched, "num_pred": num_pred, "num_gt": num_gt}


# ---------------------------------------------------------------- geometry on rendered scenes

def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(image.transpose(2, 0, 1).copy(), dtype=torch.float64)


def warp_mae(scene, src: int = 0, dst: int = 1) -> float:
    """MAE between frame dst and frame src warped through dst's GT depth, on co-visible lane pixels."""
    fs, fd = S.render_frame(scene, src), S.render_frame(scene, dst)
    K = fd.rig.intrinsics
    uv = pixel_grid(K.height, K.width)
    d = fd.depth_gt.astype(np.float64)
    X = np.stack([(uv[..., 0] - K.cx) / K.fx * d, (uv[..., 1] - K.cy) / K.fy * d, d], -1)
    T = relative_pose(fs.rig, fd.rig)
    g, front = project_points(fs.rig.intrinsics, T.inverse().apply(X))
    out, valid = bilinear_sample(_chw(fs.image), torch.as_tensor(g))
    valid = valid.numpy() & front & (d > 0) & (fd.seg_gt > 0)
    return float(np.abs(out.numpy().transpose(1, 2, 0) - fd.image)[valid].mean())


def baseline_pair(scene, baseline: float) -> tuple[CameraRig, CameraRig]:
    """Frame-0 rig and a copy displaced `baseline` meters to the right in the ego frame."""
    rig_t = scene.rig(0)
    pose = rig_t.ego_to_world.compose(Pose(np.eye(3), np.array([baseline, 0.0, 0.0])))
    return rig_t, CameraRig(rig_t.intrinsics, rig_t.cam_to_ego, pose)


def gt_bins(depth: np.ndarray, bins: np.ndarray) -> np.ndarray:
    """Index of the hypothesis nearest in inverse depth."""
    inv = 1.0 / np.maximum(depth, 1e-6)
    return np.argmin(np.abs(inv[None] - 1.0 / bins[:, None, None]), axis=0)


def argmin_accuracy(scene, baseline: float, bins: np.ndarray) -> tuple[float, int]:
    """Fraction of valid lane-mask pixels whose cost-volume argmin is the GT depth bin.

    The cost volume is built by the module on raw images (stride 1). Valid pixels are
    lane pixels with GT depth inside the hypothesis range whose GT-bin warp lands
    inside the source image.
    """
    rig_t, rig_s = baseline_pair(scene, baseline)
    img_t, depth, seg, _ = S.render_view(scene, rig_t)
    img_s, _, _, _ = S.render_view(scene, rig_s)
    grids, gvalid = sweep_grids(rig_t, rig_s, bins, stride=1)
    D = len(bins)
    E_hat, valid = warp_expanded(expand_repeat(_chw(img_s)[None], D), torch.as_tensor(grids)[None],
                                 torch.as_tensor(gvalid)[None])
    cv = cost_volume(E_hat, expand_repeat(_chw(img_t)[None], D), valid)
    am = cv.values[0].argmin(0).numpy()
    gt = gt_bins(depth, bins)
    ok = valid[0].numpy()
    m = (seg > 0) & (depth >= bins[0]) & (depth <= bins[-1]) & np.take_along_axis(ok, gt[None], 0)[0]
    return float((am[m] == gt[m]).mean()), int(m.sum())


def argmin_by_loop(scene, baseline: float, bins: np.ndarray) -> np.ndarray:
    """Per-pixel argmin of the L1 image cost, one hypothesis at a time (no cost_volume code)."""
    rig_t, rig_s = baseline_pair(scene, baseline)
    img_t, _, _, _ = S.render_view(scene, rig_t)
    img_s, _, _, _ = S.render_view(scene, rig_s)
    K = rig_t.intrinsics
    T = relative_pose(rig_s, rig_t)
    costs = []
    for d in bins:
        g, _ = warp_grid(K, K, T, d, (K.height, K.width))
        out, val = bilinear_sample(_chw(img_s), torch.as_tensor(g))
        c = np.abs(out.numpy() - img_t.transpose(2, 0, 1)).mean(0)
        costs.append(np.where(val.numpy(), c, -np.inf))
    C = np.stack(costs)
    col_max = C.max(0)
    C = np.where(np.isfinite(C), C, np.where(np.isfinite(col_max), col_max, 10.0)[None])
    return C.argmin(0)


# ---------------------------------------------------------------- synthetic future

def active_cells(mask: np.ndarray, stride: int = 8) -> int:
    """Feature cells (centered on pixel stride*j) containing at least one mask pixel."""
    H, W = mask.shape
    Hf, Wf = -(-H // stride), -(-W // stride)
    half = stride // 2
    m = np.zeros((Hf * stride + stride, Wf * stride + stride), bool)
    m[half:half + H, half:half + W] = mask
    return int(m[:Hf * stride, :Wf * stride].reshape(Hf, stride, Wf, stride).any(axis=(1, 3)).sum())


def far_lane_cells(scene, crop: CropRect, min_end: float = 60.0, max_end: float = 150.0, near: float = 40.0):
    """(current, synthetic future) active-cell counts for lanes ending between min_end and max_end meters.

    Counts cover the far portion of each lane (depth >= near). The future mask is
    the current mask resampled through the crop-and-magnify grid.
    """
    rig = scene.rig(0)
    to_ego = rig.ego_to_world.inverse()
    _, depth, _, inst = S.render_view(scene, rig)
    K = rig.intrinsics
    grid = torch.as_tensor(crop_sampling_grid(crop, (K.height, K.width)))
    out = []
    for i, lane in enumerate(scene.lanes):
        end_y = to_ego.apply(lane.point(lane.y_range[1]))[1]
        if not min_end < end_y < max_end:
            continue
        m = ((inst == i) & (depth >= near)).astype(np.float64)
        mz, _ = bilinear_sample(torch.as_tensor(m)[None], grid)
        out.append((active_cells(m > 0), active_cells(mz[0].numpy() > 0)))
    return out
