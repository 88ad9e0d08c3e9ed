"""Batch figure output: perspective overlays, 3D lane views and loss curves.

Figures are written with the Agg backend and without PNG metadata, so identical
inputs give identical bytes.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .geometry import CameraRig  # noqa: E402

GT_COLOR = (0.0, 1.0, 0.0)
PRED_COLORS = [(1.0, 0.0, 0.0), (0.0, 0.4, 1.0), (1.0, 0.6, 0.0), (0.8, 0.0, 1.0), (0.0, 0.9, 0.9), (1.0, 1.0, 0.0)]
SUBDIVIDE = 16
MIN_DEPTH = 0.1
_PNG_META = {"Software": None}


def pred_color(i: int):
    return PRED_COLORS[i % len(PRED_COLORS)]


def _runs(mask: np.ndarray):
    """Index ranges [a, b] of consecutive True entries."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts, ends))


def _extended_run(xyz: np.ndarray, a: int, b: int, extend: float) -> np.ndarray:
    """Points a..b plus `extend` of a grid step beyond each end (linear, extrapolated at the grid ends)."""
    n = len(xyz)
    pts = [xyz[a:b + 1]]
    if extend > 0 and n > 1:
        lo = xyz[a - 1] if a > 0 else 2 * xyz[0] - xyz[1]
        hi = xyz[b + 1] if b + 1 < n else 2 * xyz[-1] - xyz[-2]
        pts = [(xyz[a] + extend * (lo - xyz[a]))[None], xyz[a:b + 1], (xyz[b] + extend * (hi - xyz[b]))[None]]
    return np.concatenate(pts, 0)


def lane_ribbons(lane, rig: CameraRig, half_width: float, extend: float = 0.5) -> list[np.ndarray]:
    """Image-plane polygons (K, 2) of the lane's ground ribbon, one per visible run.

    Each visible run is lengthened by `extend` grid steps at both ends (visibility
    flags only say where grid points are seen, the marking continues past them). The
    centerline is densified by linear interpolation, offset by +-half_width along
    the ground normal to the lane direction, and projected.
    """
    K = rig.intrinsics
    e2c = rig.cam_to_ego.inverse()
    polys = []
    for a, b in _runs(lane.visibility):
        pts = _extended_run(lane.xyz, a, b, extend)
        if len(pts) < 2:
            continue
        t = np.linspace(0.0, 1.0, SUBDIVIDE + 1)[:-1]
        seg = pts[:-1, None] + t[None, :, None] * (pts[1:] - pts[:-1])[:, None]
        dense = np.concatenate([seg.reshape(-1, 3), pts[-1:]], axis=0)
        d = np.gradient(dense[:, :2], axis=0)
        n = np.stack([d[:, 1], -d[:, 0]], -1)
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        off = np.concatenate([n * half_width, np.zeros((len(n), 1))], -1)
        left, right = e2c.apply(dense - off), e2c.apply(dense + off)
        front = (left[:, 2] > MIN_DEPTH) & (right[:, 2] > MIN_DEPTH)
        for s, e in _runs(front):
            L, R = left[s:e + 1], right[s:e + 1]
            uvL = np.stack([K.fx * L[:, 0] / L[:, 2] + K.cx, K.fy * L[:, 1] / L[:, 2] + K.cy], -1)
            uvR = np.stack([K.fx * R[:, 0] / R[:, 2] + K.cx, K.fy * R[:, 1] / R[:, 2] + K.cy], -1)
            polys.append(np.concatenate([uvL, uvR[::-1]], 0))
    return polys


def _image_axes(H: int, W: int, scale: int):
    fig = plt.figure(figsize=(W * scale / 100.0, H * scale / 100.0), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)
    ax.axis("off")
    return fig, ax


def _display_image(image: np.ndarray) -> np.ndarray:
    """Lane channel over the mean texture, as RGB in [0, 1]."""
    img = np.asarray(image, np.float64)
    if img.ndim == 2:
        return np.repeat(np.clip(img, 0, 1)[..., None], 3, -1)
    base = 0.5 + 0.5 * np.clip(img[..., 1:].mean(-1), -1, 1) if img.shape[-1] > 1 else np.zeros(img.shape[:2])
    gray = np.clip(0.35 * base + img[..., 0], 0.0, 1.0)
    return np.repeat(gray[..., None], 3, -1)


def perspective_overlay(path, rig: CameraRig, gt_lanes, pred_lanes=(), image=None, half_width: float = 0.6,
                        scale: int = 1, antialiased: bool = True, extend: float = 0.5) -> Path:
    """Lanes drawn over the image (black when image is None); GT green, predictions per-instance colors."""
    K = rig.intrinsics
    H, W = K.height, K.width
    fig, ax = _image_axes(H, W, scale)
    bg = np.zeros((H, W, 3)) if image is None else _display_image(image)
    ax.imshow(bg, extent=(-0.5, W - 0.5, H - 0.5, -0.5), interpolation="nearest")
    for lane in gt_lanes:
        for poly in lane_ribbons(lane, rig, half_width, extend):
            ax.add_patch(Polygon(poly, closed=True, facecolor=GT_COLOR, edgecolor="none",
                                 antialiased=antialiased, alpha=1.0 if image is None else 0.6))
    for i, lane in enumerate(pred_lanes):
        for poly in lane_ribbons(lane, rig, half_width, extend):
            ax.add_patch(Polygon(poly, closed=True, facecolor="none", edgecolor=pred_color(i),
                                 linewidth=1.0, antialiased=antialiased))
    ax.set_xlim(-0.5, W - 0.5)
    ax.set_ylim(H - 0.5, -0.5)
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def drawn_gt_mask(png_path) -> np.ndarray:
    """Pixels painted in the GT color in a black-background overlay."""
    img = plt.imread(png_path)[..., :3]
    return (img[..., 1] > 0.5) & (img[..., 0] < 0.5) & (img[..., 2] < 0.5)


def view_3d(path, gt_lanes, pred_lanes=()) -> Path:
    """Visible lane points in ego coordinates: x lateral, y forward, z up."""
    fig = plt.figure(figsize=(6, 5), dpi=100)
    ax = fig.add_subplot(projection="3d")
    for lane in gt_lanes:
        v = lane.visibility
        ax.plot(lane.x[v], lane.y[v], lane.z[v], color=GT_COLOR, linewidth=2, label="GT")
    for i, lane in enumerate(pred_lanes):
        v = lane.visibility
        ax.plot(lane.x[v], lane.y[v], lane.z[v], color=pred_color(i), linestyle="--", label=f"pred {i}")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_zlabel("z (m)")
    handles, labels = ax.get_legend_handles_labels()
    if handles:
        uniq = dict(zip(labels, handles))
        ax.legend(uniq.values(), uniq.keys(), fontsize=7, loc="upper left")
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


LOSS_KEYS = ("total", "l_x", "l_z", "l_vis", "l_cate", "l_seg")


def loss_curves(path, manifests: dict) -> Path:
    """One panel per loss term; `manifests` maps a run label to its manifest.jsonl path."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), dpi=100)
    for label, mpath in manifests.items():
        steps = [r for r in read_manifest(mpath) if r.get("type") == "step"]
        x = [r["step"] for r in steps]
        for ax, key in zip(axes.flat, LOSS_KEYS):
            ax.plot(x, [max(r[key], 1e-12) for r in steps], label=label, linewidth=1)
    for ax, key in zip(axes.flat, LOSS_KEYS):
        ax.set_title(key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def metrics_bar(path, report: dict) -> Path:
    """Bar chart of the scalar fields of a metrics report."""
    keys = ["f1", "precision", "recall", "category_accuracy", "x_err_near", "x_err_far", "z_err_near", "z_err_far"]
    fig, ax = plt.subplots(figsize=(8, 3.5), dpi=100)
    ax.bar(range(len(keys)), [float(report[k]) for k in keys], color="0.4")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
