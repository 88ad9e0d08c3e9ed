"""Procedural multi-frame driving scenes with exact lanes, depth and poses.

The ground is the surface z = h0 + h1*Y + h2*Y^2 in world coordinates and every
lane lies on it. Images are rendered by casting supersampled rays against that
surface, so the per-pixel depth map is analytic and frames warp consistently.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import CAM_AXES_IN_EGO, CameraRig, Intrinsics, Pose
from .lanes import DEFAULT_Y_GRID, Lane3D


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    image_height: int = 72
    image_width: int = 96
    focal: float = 64.0
    cy_frac: float = 0.3
    camera_height: float = 1.5
    num_categories: int = 3
    lane_count_range: tuple[int, int] = (2, 4)
    lane_spacing: float = 3.6
    heading_bound: float = 0.03
    curvature_bound: float = 1.0e-3
    road_half_width: float = 30.0
    max_elevation: float = 2.0
    grade_bound: float = 0.01
    elevation_curvature_bound: float = 1.0e-4
    speed_range: tuple[float, float] = (0.6, 1.4)
    max_translation_per_frame: float = 2.0
    lateral_drift: float = 0.1
    frame_count: int = 3
    terminate_prob: float = 0.3
    terminate_range: tuple[float, float] = (25.0, 90.0)
    lane_half_width: float = 0.6
    dash_period: float = 8.0
    supersample: int = 6
    max_depth: float = 250.0
    y_grid: tuple[float, ...] = DEFAULT_Y_GRID

    def validate(self) -> None:
        if self.frame_count < 2:
            raise SceneError(f"frame_count must be >= 2, got {self.frame_count}")
        lo, hi = self.lane_count_range
        if lo < 0 or hi < lo:
            raise SceneError(f"empty lane-count range {self.lane_count_range}")
        if self.speed_range[1] > self.max_translation_per_frame:
            raise SceneError("speed range exceeds the per-frame translation bound")
        if self.curvature_bound < 0 or self.heading_bound < 0:
            raise SceneError("curve bounds must be nonnegative")
        if self.max_lane_offset() >= self.road_half_width:
            raise SceneError("lanes do not fit inside road_half_width")

    def max_lane_offset(self) -> float:
        """Largest distance of a lane boundary from the road center: (2 n_max - 3) half-spacings."""
        return self.lane_spacing / 2 * max(1, 2 * self.lane_count_range[1] - 3)

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, self.image_width / 2.0, self.image_height * self.cy_frac,
                          self.image_width, self.image_height)

    def cam_to_ego(self) -> Pose:
        return Pose(CAM_AXES_IN_EGO, np.array([0.0, 0.0, self.camera_height]))


@dataclass
class LaneSpec:
    ground_curve: tuple[float, float, float, float]   # x(Y) = c0 + c1 Y + c2 Y^2 + c3 Y^3
    height_curve: tuple[float, float, float]          # z(Y) = h0 + h1 Y + h2 Y^2
    y_range: tuple[float, float]
    category: int

    def x(self, Y):
        c0, c1, c2, c3 = self.ground_curve
        return c0 + Y * (c1 + Y * (c2 + Y * c3))

    def dx(self, Y):
        _, c1, c2, c3 = self.ground_curve
        return c1 + Y * (2 * c2 + 3 * c3 * Y)

    def z(self, Y):
        h0, h1, h2 = self.height_curve
        return h0 + Y * (h1 + Y * h2)

    def dz(self, Y):
        _, h1, h2 = self.height_curve
        return h1 + 2 * h2 * Y

    def point(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        return np.stack([self.x(Y), Y, self.z(Y)], axis=-1)


@dataclass
class RenderSettings:
    intrinsics: Intrinsics
    cam_to_ego: Pose
    height_curve: tuple[float, float, float]
    lane_half_width: float = 0.6
    dash_period: float = 8.0
    supersample: int = 6
    max_depth: float = 250.0
    y_grid: tuple[float, ...] = DEFAULT_Y_GRID


@dataclass
class SceneSpec:
    lanes: list[LaneSpec]
    ego_trajectory: list[Pose]
    texture_seed: int
    frame_count: int
    render: RenderSettings

    def rig(self, frame_idx: int) -> CameraRig:
        return CameraRig(self.render.intrinsics, self.render.cam_to_ego, self.ego_trajectory[frame_idx])

    def to_dict(self) -> dict:
        r = self.render
        return {
            "lanes": [asdict(l) for l in self.lanes],
            "ego_trajectory": [p.to_dict() for p in self.ego_trajectory],
            "texture_seed": self.texture_seed,
            "frame_count": self.frame_count,
            "render": {
                "intrinsics": r.intrinsics.to_dict(),
                "cam_to_ego": r.cam_to_ego.to_dict(),
                "height_curve": list(r.height_curve),
                "lane_half_width": r.lane_half_width,
                "dash_period": r.dash_period,
                "supersample": r.supersample,
                "max_depth": r.max_depth,
                "y_grid": list(r.y_grid),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        r = dict(d["render"])
        render = RenderSettings(
            intrinsics=Intrinsics.from_dict(r.pop("intrinsics")),
            cam_to_ego=Pose.from_dict(r.pop("cam_to_ego")),
            height_curve=tuple(r.pop("height_curve")),
            y_grid=tuple(r.pop("y_grid")),
            **r,
        )
        lanes = [LaneSpec(tuple(l["ground_curve"]), tuple(l["height_curve"]), tuple(l["y_range"]),
                          int(l["category"])) for l in d["lanes"]]
        return cls(lanes, [Pose.from_dict(p) for p in d["ego_trajectory"]], int(d["texture_seed"]),
                   int(d["frame_count"]), render)


@dataclass
class FrameSample:
    image: np.ndarray        # (H, W, 3) float32: lane intensity, texture A, texture B
    depth_gt: np.ndarray     # (H, W) float32 camera z-depth; 0 where no surface
    rig: CameraRig
    lanes_gt: list[Lane3D]
    seg_gt: np.ndarray       # (H, W) uint8
    timestamp: int
    instance_gt: np.ndarray = field(default=None)  # (H, W) int16 lane index, -1 off-lane


def _clamp_polynomial(coeffs: list[float], offset_terms: int, y_lo: float, y_hi: float, bound: float,
                      base) -> list[float]:
    """Halve the non-constant terms until |poly| <= bound on [y_lo, y_hi]."""
    Y = np.linspace(y_lo, y_hi, 257)
    coeffs = list(coeffs)
    for _ in range(60):
        val = base(coeffs, Y)
        if np.max(np.abs(val)) <= bound:
            return coeffs
        coeffs = coeffs[:offset_terms] + [c * 0.5 for c in coeffs[offset_terms:]]
    return coeffs[:offset_terms] + [0.0] * (len(coeffs) - offset_terms)


def _poly(coeffs, Y):
    out = np.zeros_like(Y, dtype=np.float64)
    for c in reversed(coeffs):
        out = out * Y + c
    return out


def generate_scene(seed: int, config: SimConfig | None = None) -> SceneSpec:
    config = config or SimConfig()
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7E]))

    speed = rng.uniform(*config.speed_range)
    y_first, y_last = 0.0, speed * (config.frame_count - 1)
    y_lo, y_hi = y_first - 20.0, y_last + 160.0

    k = config.curvature_bound
    road = [0.0, rng.uniform(-config.heading_bound, config.heading_bound),
            rng.uniform(-k, k), rng.uniform(-k, k) * 0.01]
    limit = config.road_half_width - config.max_lane_offset()
    road = _clamp_polynomial(road, 1, y_lo, y_hi, limit, _poly)

    g = config.grade_bound
    height = [0.0, rng.uniform(-g, g), rng.uniform(-config.elevation_curvature_bound,
                                                   config.elevation_curvature_bound)]
    height = _clamp_polynomial(height, 1, y_lo, y_hi, config.max_elevation, _poly)

    lo, hi = config.lane_count_range
    n_lanes = int(rng.integers(lo, hi + 1))
    # boundary j sits at (2j - 1) * spacing / 2; j = 0, 1 bound the ego lane
    j0 = int(rng.integers(2 - n_lanes, 1)) if n_lanes >= 2 else int(rng.integers(0, 2))
    half = config.lane_spacing / 2
    offsets = [half * (2 * (j0 + i) - 1) for i in range(n_lanes)]
    lanes = []
    for off in offsets:
        end = y_hi
        if rng.uniform() < config.terminate_prob:
            end = y_last + rng.uniform(*config.terminate_range)
        coeffs = [off + road[0], road[1], road[2], road[3]]
        lanes.append(LaneSpec(tuple(float(c) for c in coeffs), tuple(float(h) for h in height),
                              (float(y_lo), float(end)), int(rng.integers(0, config.num_categories))))

    trajectory = []
    drift = 0.0
    for f in range(config.frame_count):
        Y = y_first + speed * f
        if f > 0:
            drift += rng.uniform(-config.lateral_drift, config.lateral_drift)
        heading = math.atan(road[1] + Y * (2 * road[2] + 3 * road[3] * Y))
        pos = np.array([_poly(road, np.array(Y)) + drift, Y, _poly(height, np.array(Y))], dtype=np.float64)
        trajectory.append(Pose.from_yaw(-heading, pos))

    render = RenderSettings(
        intrinsics=config.intrinsics(),
        cam_to_ego=config.cam_to_ego(),
        height_curve=tuple(float(h) for h in height),
        lane_half_width=config.lane_half_width,
        dash_period=config.dash_period,
        supersample=config.supersample,
        max_depth=config.max_depth,
        y_grid=tuple(config.y_grid),
    )
    return SceneSpec(lanes, trajectory, int(rng.integers(0, 2**31 - 1)), config.frame_count, render)


def _ego_y_of_world(lane: LaneSpec, ego_pose: Pose, Y):
    r = ego_pose.rotation[:, 1]
    t = ego_pose.translation
    P = lane.point(Y)
    return (P - t) @ r


def sample_lane_points(lane: LaneSpec, ego_pose: Pose, y_grid) -> Lane3D:
    y_grid = np.asarray(y_grid, dtype=np.float64)
    if y_grid.size == 0:
        raise SceneError("empty y_grid")
    if np.any(np.diff(y_grid) <= 0):
        raise SceneError("y_grid must be strictly increasing")
    r = ego_pose.rotation[:, 1]
    t = ego_pose.translation
    # Newton solve for the world Y whose ego-frame forward coordinate is each grid value
    Y = y_grid + t[1]
    for _ in range(50):
        f = _ego_y_of_world(lane, ego_pose, Y) - y_grid
        if np.max(np.abs(f)) <= 1e-13 * (1 + np.max(np.abs(y_grid))):
            break
        df = r[0] * lane.dx(Y) + r[1] + r[2] * lane.dz(Y)
        Y = Y - f / df
    pts = ego_pose.inverse().apply(lane.point(Y))
    pts[:, 1] = y_grid
    y_min, y_max = lane.y_range
    visible = (Y >= y_min) & (Y <= y_max)
    return Lane3D(pts, visible, lane.category)


def _texture(seed: int, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E47]))
    chans = []
    for _ in range(2):
        val = np.full(X.shape, 0.5)
        for amp, lam in ((0.3, (1.5, 3.0)), (0.1, (3.0, 8.0))):
            # mostly lateral variation; rows far away span meters of depth and would alias
            kx = 2 * np.pi / rng.uniform(*lam) * rng.choice([-1.0, 1.0])
            ky = 2 * np.pi / rng.uniform(15.0, 40.0) * rng.choice([-1.0, 1.0])
            phase = rng.uniform(0, 2 * np.pi)
            val = val + amp * np.sin(kx * X + ky * Y + phase)
        chans.append(val)
    return chans[0], chans[1]


SKY_VALUES = (0.0, 0.85, 0.15)


def _ray_cast(render: RenderSettings, rig: CameraRig, u: np.ndarray, v: np.ndarray):
    """Intersect pixel rays with the ground. Returns camera depth (0 = miss) and world points."""
    K = rig.intrinsics
    cam_to_world = rig.cam_to_world
    d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    D = d_cam @ cam_to_world.rotation.T
    O = cam_to_world.translation
    h0, h1, h2 = render.height_curve
    a = h2 * D[..., 1] ** 2
    b = 2 * h2 * O[1] * D[..., 1] + h1 * D[..., 1] - D[..., 2]
    c = h2 * O[1] ** 2 + h1 * O[1] + h0 - O[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = np.where(b != 0, -c / b, np.inf)
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        r1 = (-b - sq) / (2 * a)
        r2 = (-b + sq) / (2 * a)
        big = np.inf
        r1 = np.where((disc >= 0) & (r1 > 0), r1, big)
        r2 = np.where((disc >= 0) & (r2 > 0), r2, big)
        quad = np.minimum(r1, r2)
        s = np.where(np.abs(a) < 1e-14, np.where(lin > 0, lin, big), quad)
    hit = np.isfinite(s) & (s > 0) & (s <= render.max_depth)
    s = np.where(hit, s, 0.0)
    P = O + s[..., None] * D
    return s, P, hit


def _dash_envelope(Y, period: float):
    """Dashes as a raised-cosine modulation along the lane; hard dash ends alias badly far away."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * Y / period)


def _lane_profile(lane: LaneSpec, render: RenderSettings, P: np.ndarray, hit: np.ndarray) -> np.ndarray:
    X, Y = P[..., 0], P[..., 1]
    y_min, y_max = lane.y_range
    signed = (X - lane.x(Y)) / np.sqrt(1 + lane.dx(Y) ** 2)
    hw = render.lane_half_width
    # tent across the marking, brighter on its right edge so the profile is not mirror-symmetric
    prof = np.clip(1.0 - np.abs(signed) / hw, 0.0, 1.0) * (0.65 + 0.35 * signed / hw)
    if lane.category == 1:
        prof = prof * _dash_envelope(Y, render.dash_period)
    elif lane.category == 2:
        prof = prof * 0.6
    return np.where(hit & (Y >= y_min) & (Y <= y_max), prof, 0.0)


def render_view(scene: SceneSpec, rig: CameraRig):
    """Render an arbitrary rig against the scene: (image, depth, seg, instance)."""
    render = scene.render
    K = rig.intrinsics
    H, W, S = K.height, K.width, render.supersample
    # tent prefilter of radius 1 px: bilinear resampling of the result stays accurate
    offs = 2.0 * ((np.arange(S) + 0.5) / S - 0.5)
    w1 = 1.0 - np.abs(offs)
    wts = (w1[:, None] * w1[None, :]) / np.sum(w1) ** 2
    v_c, u_c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    u = u_c[:, :, None, None] + offs[None, None, None, :]
    v = v_c[:, :, None, None] + offs[None, None, :, None]
    u, v = np.broadcast_arrays(u, v)
    s, P, hit = _ray_cast(render, rig, u, v)

    lane_vals = np.stack([_lane_profile(l, render, P, hit) for l in scene.lanes], axis=0) \
        if scene.lanes else np.zeros((0,) + u.shape)
    ta, tb = _texture(scene.texture_seed, P[..., 0], P[..., 1])
    lane_ch = lane_vals.max(axis=0) if len(scene.lanes) else np.zeros(u.shape)
    ta = np.where(hit, ta, SKY_VALUES[1])
    tb = np.where(hit, tb, SKY_VALUES[2])
    image = np.stack([(c * wts).sum(axis=(2, 3)) for c in (lane_ch, ta, tb)], axis=-1)

    depth, _, _ = _ray_cast(render, rig, u_c, v_c)
    seg = (image[..., 0] > 0).astype(np.uint8)
    if len(scene.lanes):
        per_lane = lane_vals.sum(axis=(3, 4))
        instance = np.where(per_lane.max(axis=0) > 0, per_lane.argmax(axis=0), -1).astype(np.int16)
    else:
        instance = np.full((H, W), -1, dtype=np.int16)
    return image.astype(np.float32), depth.astype(np.float32), seg, instance


def visible_in_image(lane: Lane3D, rig: CameraRig) -> np.ndarray:
    K = rig.intrinsics
    X_cam = rig.cam_to_ego.inverse().apply(lane.xyz)
    z = X_cam[:, 2]
    zs = np.where(z > 0, z, 1.0)
    u = K.fx * X_cam[:, 0] / zs + K.cx
    v = K.fy * X_cam[:, 1] / zs + K.cy
    return (z > 0) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)


def render_frame(scene: SceneSpec, frame_idx: int) -> FrameSample:
    if not 0 <= frame_idx < scene.frame_count:
        raise SceneError(f"frame_idx {frame_idx} outside [0, {scene.frame_count})")
    rig = scene.rig(frame_idx)
    image, depth, seg, instance = render_view(scene, rig)
    lanes_gt = []
    for lane in scene.lanes:
        l3 = sample_lane_points(lane, rig.ego_to_world, scene.render.y_grid)
        l3.visibility = l3.visibility & visible_in_image(l3, rig)
        lanes_gt.append(l3)
    return FrameSample(image, depth, rig, lanes_gt, seg, frame_idx, instance)
