"""Lane-level evaluation: pair matching, F1, category accuracy, near/far x and z errors.

A prediction matches a GT lane when at least 75% of their mutually visible grid
points lie within the distance threshold (1.5 m by default) in the x-z plane.
Frames are matched one-to-one maximizing the matched count, then minimizing the
summed per-pair mean distance. Sums use math.fsum so results do not depend on
accumulation order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .lanes import Lane3D

REPORT_VERSION = 1
NEAR_FAR_SPLIT = 40.0


@dataclass
class MetricsReport:
    f1: float
    precision: float
    recall: float
    category_accuracy: float
    x_err_near: float
    x_err_far: float
    z_err_near: float
    z_err_far: float
    matched: int
    num_pred: int
    num_gt: int
    tags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d.pop("version", None)
        return cls(**d)


def lane_pair_distance(pred: Lane3D, gt: Lane3D, threshold: float = 1.5, ratio: float = 0.75):
    """Per-point x-z distances over mutually visible points, and the match flag."""
    if len(pred.y) != len(gt.y) or not np.array_equal(pred.y, gt.y):
        raise ValueError("lanes are not sampled on the same y grid")
    both = pred.visibility & gt.visibility
    if not both.any():
        return np.zeros(0), False
    d = np.hypot(pred.x[both] - gt.x[both], pred.z[both] - gt.z[both])
    return d, bool(np.count_nonzero(d < threshold) >= ratio * len(d))


def _flag_matrix(preds, gts, threshold, ratio):
    flag = np.zeros((len(preds), len(gts)), bool)
    dist = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            d, ok = lane_pair_distance(p, g, threshold, ratio)
            flag[i, j] = ok
            dist[i, j] = math.fsum(d) / len(d) if len(d) else 0.0
    return flag, dist


def match_lanes(preds, gts, threshold: float = 1.5, ratio: float = 0.75) -> list[tuple[int, int]]:
    """One-to-one matching over flagged pairs: max count, then min summed mean distance."""
    if not preds or not gts:
        return []
    flag, dist = _flag_matrix(preds, gts, threshold, ratio)
    if not flag.any():
        return []
    big = 1.0 + 2.0 * math.fsum(dist[flag])
    cost = np.where(flag, dist - big, 0.0)
    r, c = linear_sum_assignment(cost)
    return sorted((int(i), int(j)) for i, j in zip(r, c) if flag[i, j])


class _Accumulator:
    def __init__(self):
        self.matched = self.num_pred = self.num_gt = self.cat_ok = 0
        self.err = {k: [] for k in ("x_near", "x_far", "z_near", "z_far")}

    def add(self, preds, gts, pairs):
        self.num_pred += len(preds)
        self.num_gt += len(gts)
        self.matched += len(pairs)
        for i, j in pairs:
            p, g = preds[i], gts[j]
            self.cat_ok += int(p.category == g.category)
            both = p.visibility & g.visibility
            near = both & (g.y <= NEAR_FAR_SPLIT)
            far = both & (g.y > NEAR_FAR_SPLIT)
            self.err["x_near"].extend(np.abs(p.x - g.x)[near].tolist())
            self.err["x_far"].extend(np.abs(p.x - g.x)[far].tolist())
            self.err["z_near"].extend(np.abs(p.z - g.z)[near].tolist())
            self.err["z_far"].extend(np.abs(p.z - g.z)[far].tolist())

    def report(self, tags=None) -> MetricsReport:
        P = self.matched / self.num_pred if self.num_pred else 0.0
        R = self.matched / self.num_gt if self.num_gt else 0.0
        f1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
        mean = lambda v: math.fsum(v) / len(v) if v else 0.0
        return MetricsReport(
            f1=f1, precision=P, recall=R,
            category_accuracy=self.cat_ok / self.matched if self.matched else 0.0,
            x_err_near=mean(self.err["x_near"]), x_err_far=mean(self.err["x_far"]),
            z_err_near=mean(self.err["z_near"]), z_err_far=mean(self.err["z_far"]),
            matched=self.matched, num_pred=self.num_pred, num_gt=self.num_gt, tags=dict(tags or {}),
        )


def evaluate(preds: list[Lane3D], gts: list[Lane3D], threshold: float = 1.5, ratio: float = 0.75,
             tags: dict | None = None) -> MetricsReport:
    """Evaluate one frame."""
    return evaluate_frames([(preds, gts)], threshold, ratio, tags)


def evaluate_frames(frames, threshold: float = 1.5, ratio: float = 0.75, tags: dict | None = None) -> MetricsReport:
    """Evaluate a split given (preds, gts) per frame; counts and errors pool over frames."""
    acc = _Accumulator()
    for preds, gts in frames:
        acc.add(preds, gts, match_lanes(preds, gts, threshold, ratio))
    return acc.report(tags)
