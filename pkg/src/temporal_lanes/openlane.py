"""Adapter for OpenLane-style per-frame JSON annotations.

Per-frame schema (extra keys are ignored):

    {
      "intrinsic": 3x3 camera matrix,
      "extrinsic": 4x4 camera-to-ego transform,
      "pose":      4x4 ego-to-world transform,
      "image_size": [height, width]            (optional; default 2*cy, 2*cx)
      "file_path": image path relative to the annotation file (optional)
      "timestamp": int                         (optional; default frame order)
      "lane_lines": [
        {"xyz": [[x...], [y...], [z...]],      ego frame, x right, y forward, z up
         "category": int,
         "visibility": [0/1 per point]}        (optional; default all visible)
      ]
    }

Lanes are resampled onto the y grid by linear interpolation in y. A grid point is
visible when it lies inside the source y range and the interpolated source
visibility exceeds 0.5. Frames whose image is absent are ingested metadata-only
(rig and lanes, no image/depth/seg arrays).
"""
from __future__ import annotations

import logging
import warnings
from pathlib import Path

import numpy as np

from . import io
from .geometry import CameraRig, GeometryError, Intrinsics, Pose
from .lanes import Lane3D

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    def __init__(self, file, field: str, problem: str):
        self.file, self.field = str(file), field
        super().__init__(f"{file}: {field}: {problem}")


def _matrix(doc: dict, key: str, shape, file) -> np.ndarray:
    if key not in doc:
        raise SchemaError(file, key, "missing field")
    try:
        arr = np.asarray(doc[key], dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(file, key, "not a numeric matrix") from None
    if arr.shape != shape or not np.all(np.isfinite(arr)):
        raise SchemaError(file, key, f"expected finite {shape} matrix, got shape {arr.shape}")
    return arr


def parse_rig(doc: dict, file="<frame>") -> CameraRig:
    K = _matrix(doc, "intrinsic", (3, 3), file)
    ext = _matrix(doc, "extrinsic", (4, 4), file)
    pose = _matrix(doc, "pose", (4, 4), file)
    if "image_size" in doc:
        size = doc["image_size"]
        if not (isinstance(size, list) and len(size) == 2 and all(isinstance(s, int) and s > 0 for s in size)):
            raise SchemaError(file, "image_size", "expected [height, width] positive integers")
        height, width = size
    else:
        height, width = int(round(2 * K[1, 2])), int(round(2 * K[0, 2]))
    try:
        intr = Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height)
        return CameraRig(intr, Pose.from_matrix(ext), Pose.from_matrix(pose))
    except GeometryError as exc:
        raise SchemaError(file, "intrinsic", str(exc)) from None


def parse_lane(lane: dict, index: int, y_grid, num_categories: int | None, file="<frame>") -> Lane3D:
    where = f"lane_lines[{index}]"
    if not isinstance(lane, dict):
        raise SchemaError(file, where, "expected an object")
    if "xyz" not in lane:
        raise SchemaError(file, f"{where}.xyz", "missing field")
    try:
        xyz = np.asarray(lane["xyz"], dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(file, f"{where}.xyz", "expected three equal-length numeric lists") from None
    if xyz.ndim != 2 or xyz.shape[0] != 3 or xyz.shape[1] < 2:
        raise SchemaError(file, f"{where}.xyz", f"expected [xs, ys, zs] with >= 2 points, got shape {xyz.shape}")
    if not np.all(np.isfinite(xyz)):
        raise SchemaError(file, f"{where}.xyz", "non-finite coordinate")
    if "category" not in lane:
        raise SchemaError(file, f"{where}.category", "missing field")
    cat = lane["category"]
    if isinstance(cat, bool) or not isinstance(cat, int) or cat < 0 or (num_categories is not None and cat >= num_categories):
        raise SchemaError(file, f"{where}.category", f"invalid category {cat!r}")
    n = xyz.shape[1]
    vis = np.ones(n)
    if "visibility" in lane:
        vis = np.asarray(lane["visibility"], dtype=np.float64)
        if vis.shape != (n,):
            raise SchemaError(file, f"{where}.visibility", f"expected {n} entries, got shape {vis.shape}")
    xs, ys, zs = xyz
    if np.any(np.diff(ys) < 0):
        warnings.warn(f"{file}: {where}: y is not monotonic; points sorted by y")
        order = np.argsort(ys, kind="stable")
        xs, ys, zs, vis = xs[order], ys[order], zs[order], vis[order]
    return resample_lane(xs, ys, zs, vis, y_grid, cat)


def resample_lane(xs, ys, zs, vis, y_grid, category: int) -> Lane3D:
    """Linear interpolation in y onto the grid; outside the source range points are invisible."""
    y = np.asarray(y_grid, dtype=np.float64)
    x = np.interp(y, ys, xs)
    z = np.interp(y, ys, zs)
    inside = (y >= ys[0]) & (y <= ys[-1])
    visible = inside & (np.interp(y, ys, np.asarray(vis, np.float64)) > 0.5)
    return Lane3D(np.stack([x, y, z], -1), visible, category)


def parse_frame(doc, y_grid, num_categories: int | None = None, file="<frame>"):
    """(CameraRig, [Lane3D]) from one annotation document."""
    if not isinstance(doc, dict):
        raise SchemaError(file, "<root>", "expected a JSON object")
    rig = parse_rig(doc, file)
    if "lane_lines" not in doc:
        raise SchemaError(file, "lane_lines", "missing field")
    if not isinstance(doc["lane_lines"], list):
        raise SchemaError(file, "lane_lines", "expected a list")
    lanes = [parse_lane(l, i, y_grid, num_categories, file) for i, l in enumerate(doc["lane_lines"])]
    return rig, lanes


def export_frame(rig: CameraRig, lanes, timestamp: int | None = None, file_path: str | None = None) -> dict:
    """Internal GT -> OpenLane-style document (every grid point, with per-point visibility)."""
    K = rig.intrinsics
    doc = {
        "intrinsic": K.matrix.tolist(),
        "extrinsic": rig.cam_to_ego.matrix.tolist(),
        "pose": rig.ego_to_world.matrix.tolist(),
        "image_size": [K.height, K.width],
        "lane_lines": [{"xyz": [l.x.tolist(), l.y.tolist(), l.z.tolist()], "category": l.category,
                        "visibility": l.visibility.astype(int).tolist()} for l in lanes],
    }
    if timestamp is not None:
        doc["timestamp"] = int(timestamp)
    if file_path is not None:
        doc["file_path"] = file_path
    return doc


def export_dataset(scenes, out_dir) -> None:
    """Write scenes (lists of FrameSample) as segment_%04d/%04d.json annotations."""
    out = Path(out_dir)
    for s, frames in enumerate(scenes):
        seg = out / f"segment_{s:04d}"
        seg.mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(frames):
            io.write_json(seg / f"{t:04d}.json", export_frame(f.rig, f.lanes_gt, f.timestamp))


def _segments(ann_dir: Path) -> list[tuple[str, list[Path]]]:
    segs = []
    top = sorted(ann_dir.glob("*.json"))
    if top:
        segs.append((ann_dir.name, top))
    for d in sorted(p for p in ann_dir.iterdir() if p.is_dir()):
        files = sorted(d.glob("*.json"))
        if files:
            segs.append((d.name, files))
    return segs


def _load_image(path: Path) -> np.ndarray | None:
    if not path.is_file():
        return None
    if path.suffix == ".npyish":
        return io.load_npyish(path).astype(np.float32)
    import matplotlib.image as mpimg

    img = np.asarray(mpimg.imread(path), dtype=np.float32)
    if img.max() > 1.0:
        img = img / 255.0
    return img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, -1)


def ingest(ann_dir, out_dir, y_grid, num_categories: int | None = None) -> dict:
    """Convert a directory of OpenLane-style annotations to the internal dataset layout.

    Each subdirectory (or the top level) is one segment, frames ordered by file name.
    Returns the written index; all schema violations are raised as SchemaError.
    """
    ann, out = Path(ann_dir), Path(out_dir)
    if not ann.is_dir():
        raise FileNotFoundError(f"{ann}: annotation directory not found")
    segments = _segments(ann)
    if not segments:
        raise SchemaError(ann, "<dir>", "no annotation files")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s, (name, files) in enumerate(segments):
        sdir = out / f"scene_{s:04d}"
        lane_counts, meta_only = [], 0
        for t, f in enumerate(files):
            try:
                doc = io.read_json(f)
            except ValueError as exc:
                raise SchemaError(f, "<root>", f"invalid JSON ({exc})") from None
            rig, lanes = parse_frame(doc, y_grid, num_categories, f)
            fdir = sdir / f"frame_{t:04d}"
            fdir.mkdir(parents=True, exist_ok=True)
            image = _load_image(f.parent / doc["file_path"]) if isinstance(doc.get("file_path"), str) else None
            if image is None:
                meta_only += 1
            else:
                io.save_npyish(fdir / "image.npyish", image)
            io.write_json(fdir / "rig.json", rig.to_dict())
            io.write_json(fdir / "lanes.json", {"timestamp": int(doc.get("timestamp", t)),
                                                "lanes": [l.to_dict() for l in lanes]})
            lane_counts.append(len(lanes))
        entries.append({"dir": sdir.name, "source": name, "frames": len(files), "lane_counts": lane_counts,
                        "lanes_total": sum(lane_counts), "metadata_only_frames": meta_only})
        log.info("segment %s: %d frames, %d metadata-only", name, len(files), meta_only)
    index = {"version": 1, "source": "openlane", "y_grid": [float(y) for y in y_grid], "scenes": entries,
             "lanes_total": sum(e["lanes_total"] for e in entries)}
    io.write_json(out / "index.json", index)
    return index
