from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_Y_GRID = tuple(float(y) for y in np.linspace(3.0, 103.0, 20))


@dataclass
class Lane3D:
    """A lane sampled on a fixed longitudinal grid, in the ego frame (meters)."""

    xyz: np.ndarray          # (N, 3)
    visibility: np.ndarray   # (N,) bool
    category: int

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.visibility = np.asarray(self.visibility, dtype=bool).reshape(-1)
        self.category = int(self.category)
        if len(self.visibility) != len(self.xyz):
            raise ValueError("visibility length differs from point count")

    @property
    def x(self) -> np.ndarray:
        return self.xyz[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xyz[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    def to_dict(self) -> dict:
        return {"xyz": self.xyz.tolist(), "visibility": self.visibility.astype(int).tolist(),
                "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> "Lane3D":
        return cls(np.asarray(d["xyz"], float), np.asarray(d["visibility"], bool), int(d["category"]))

    def allclose(self, other: "Lane3D", atol: float = 1e-9) -> bool:
        return (self.category == other.category and np.array_equal(self.visibility, other.visibility)
                and np.allclose(self.xyz, other.xyz, atol=atol, rtol=0))


def prediction_to_lanes(x, z, vis_logits, cat_logits, y_grid) -> list[Lane3D]:
    """Threshold one frame's raw predictions into lanes.

    Keeps queries whose arg-max class is not the trailing no-object class; a point is
    visible when sigmoid(vis_logit) > 0.5.
    """
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    vis = np.asarray(vis_logits, float) > 0.0
    cats = np.asarray(cat_logits, float)
    no_object = cats.shape[-1] - 1
    y = np.asarray(y_grid, float)
    lanes = []
    for m in range(x.shape[0]):
        c = int(np.argmax(cats[m]))
        if c == no_object:
            continue
        lanes.append(Lane3D(np.stack([x[m], y, z[m]], axis=-1), vis[m], c))
    return lanes
