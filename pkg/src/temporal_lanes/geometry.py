"""Pinhole projection, rigid poses, plane-sweep warp grids and bilinear sampling.

Conventions: camera x-right, y-down, z-forward. Ego x-right, y-forward, z-up.
Pixel (row i, col j) has its center at (u=j, v=i).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


BORDER_TOL = 1e-9


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, stride: int) -> "Intrinsics":
        """Intrinsics of a stride-`stride` feature grid whose cell j is centered on pixel j*stride."""
        return Intrinsics(
            self.fx / stride,
            self.fy / stride,
            self.cx / stride,
            self.cy / stride,
            -(-self.width // stride),
            -(-self.height // stride),
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """Rigid transform X_out = rotation @ X_in + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise GeometryError("rotation is not a proper orthonormal matrix")

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation about +z by `yaw` radians (counter-clockwise seen from above)."""
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.asarray(translation, float))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(X, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["rotation"], float).reshape(3, 3), np.asarray(d["translation"], float))


# camera axes expressed in ego axes
CAM_AXES_IN_EGO = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])

RIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CameraRig:
    intrinsics: Intrinsics
    cam_to_ego: Pose
    ego_to_world: Pose

    @property
    def cam_to_world(self) -> Pose:
        return self.ego_to_world.compose(self.cam_to_ego)

    def with_intrinsics(self, K: Intrinsics) -> "CameraRig":
        return CameraRig(K, self.cam_to_ego, self.ego_to_world)

    def to_dict(self) -> dict:
        return {
            "version": RIG_SCHEMA_VERSION,
            "intrinsics": self.intrinsics.to_dict(),
            "cam_to_ego": self.cam_to_ego.to_dict(),
            "ego_to_world": self.ego_to_world.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        if d.get("version", RIG_SCHEMA_VERSION) != RIG_SCHEMA_VERSION:
            raise GeometryError(f"unsupported rig schema version {d.get('version')}")
        return cls(Intrinsics.from_dict(d["intrinsics"]), Pose.from_dict(d["cam_to_ego"]),
                   Pose.from_dict(d["ego_to_world"]))


def project(K: Intrinsics, X_cam) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in X_cam)
    if z <= 0:
        raise BehindCameraError(f"point is behind the camera (z={z})")
    return K.fx * x / z + K.cx, K.fy * y / z + K.cy, z


def unproject(K: Intrinsics, u: float, v: float, depth: float) -> np.ndarray:
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    return np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])


def project_points(K: Intrinsics, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of (..., 3) points; returns (..., 2) pixels and a z>0 mask."""
    X = np.asarray(X, dtype=np.float64)
    z = X[..., 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / zs + K.cx, K.fy * X[..., 1] / zs + K.cy], axis=-1)
    return uv, ok


def relative_pose(rig_src: CameraRig, rig_dst: CameraRig) -> Pose:
    """T with X_dst_cam = T · X_src_cam."""
    return rig_dst.cam_to_world.inverse().compose(rig_src.cam_to_world)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) array of (u, v) pixel centers."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([u, v], axis=-1)


def warp_grid(K_src: Intrinsics, K_dst: Intrinsics, T_rel: Pose, depth: float,
              out_size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates for every destination pixel at a fronto-parallel depth.

    `T_rel` maps source-camera points to destination-camera points. Returns the
    (H, W, 2) grid and a validity mask (in front of the source camera and inside
    its image bounds).
    """
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    H, W = out_size
    uv = pixel_grid(H, W)
    X_dst = np.stack([(uv[..., 0] - K_dst.cx) / K_dst.fx * depth,
                      (uv[..., 1] - K_dst.cy) / K_dst.fy * depth,
                      np.full((H, W), float(depth))], axis=-1)
    X_src = T_rel.inverse().apply(X_dst)
    grid, front = project_points(K_src, X_src)
    # points within roundoff of the border count as inside and are snapped onto it
    lim = np.array([K_src.width - 1, K_src.height - 1], dtype=np.float64)
    inside = np.all((grid >= -BORDER_TOL) & (grid <= lim + BORDER_TOL), axis=-1)
    grid = np.where(inside[..., None], np.clip(grid, 0.0, lim), grid)
    return grid, front & inside


@dataclass(frozen=True)
class CropRect:
    x0: float
    y0: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("degenerate crop")


def zoom_intrinsics(K: Intrinsics, crop: CropRect, out_size: tuple[int, int]) -> Intrinsics:
    """Intrinsics of the crop-and-resize view: p' = (p - crop_origin) * out_size / crop_size."""
    if crop.x0 < 0 or crop.y0 < 0 or crop.x0 + crop.width > K.width or crop.y0 + crop.height > K.height:
        raise GeometryError("crop exceeds image bounds")
    H_out, W_out = out_size
    sx, sy = W_out / crop.width, H_out / crop.height
    return Intrinsics(K.fx * sx, K.fy * sy, (K.cx - crop.x0) * sx, (K.cy - crop.y0) * sy, W_out, H_out)


def crop_sampling_grid(crop: CropRect, out_size: tuple[int, int]) -> np.ndarray:
    """(H_out, W_out, 2) source pixel coordinates realising the crop-scale map."""
    H_out, W_out = out_size
    uv = pixel_grid(H_out, W_out)
    return np.stack([uv[..., 0] * crop.width / W_out + crop.x0,
                     uv[..., 1] * crop.height / H_out + crop.y0], axis=-1)


def bilinear_sample(fmap: torch.Tensor, grid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Bilinearly sample `fmap` at pixel coordinates.

    fmap: (C, H, W) or (B, C, H, W). grid: (H_o, W_o, 2) or (B, H_o, W_o, 2) of
    (u, v) pixel coordinates. Samples outside [0, W-1] x [0, H-1] (or non-finite)
    are zero and reported invalid in the returned (B?, H_o, W_o) mask.
    Differentiable in both `fmap` and `grid`.
    """
    squeeze = fmap.dim() == 3
    if squeeze:
        fmap = fmap.unsqueeze(0)
        grid = grid.unsqueeze(0)
    if grid.dim() != 4 or grid.shape[-1] != 2 or grid.shape[0] != fmap.shape[0]:
        raise GeometryError(f"grid shape {tuple(grid.shape)} incompatible with map {tuple(fmap.shape)}")
    B, C, H, W = fmap.shape
    u, v = grid[..., 0], grid[..., 1]
    valid = torch.isfinite(u) & torch.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    u = torch.where(valid, u, torch.zeros_like(u)).to(fmap.dtype)
    v = torch.where(valid, v, torch.zeros_like(v)).to(fmap.dtype)
    # explicit gathers: integer coordinates get weights exactly 1 and 0, so texels come back bit-exact
    u0 = torch.floor(u).clamp(0, max(W - 2, 0)).detach()
    v0 = torch.floor(v).clamp(0, max(H - 2, 0)).detach()
    du, dv = u - u0, v - v0
    u0, v0 = u0.long(), v0.long()
    u1, v1 = (u0 + 1).clamp(max=W - 1), (v0 + 1).clamp(max=H - 1)
    flat = fmap.reshape(B, C, H * W)
    out_shape = (B, C) + tuple(grid.shape[1:3])

    def tap(iv, iu):
        idx = (iv * W + iu).reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape(out_shape)

    du, dv = du.unsqueeze(1), dv.unsqueeze(1)
    out = (tap(v0, u0) * ((1 - du) * (1 - dv)) + tap(v0, u1) * (du * (1 - dv))
           + tap(v1, u0) * ((1 - du) * dv) + tap(v1, u1) * (du * dv))
    out = out * valid.unsqueeze(1).to(out.dtype)
    if squeeze:
        return out[0], valid[0]
    return out, valid
