"""Random object scaling: per-box anisotropic scaling of in-box points and labels."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Box3D
from .rng import stream


@dataclass(frozen=True)
class ScaleRange:
    r_l: tuple[float, float] = (0.8, 1.2)
    r_w: tuple[float, float] = (0.8, 1.2)
    r_h: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        for name in ("r_l", "r_w", "r_h"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lower <= upper, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def identity(cls) -> "ScaleRange":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))

    def to_dict(self) -> dict:
        return {"r_l": list(self.r_l), "r_w": list(self.r_w), "r_h": list(self.r_h)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleRange":
        return cls(tuple(d["r_l"]), tuple(d["r_w"]), tuple(d["r_h"]))


def rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express points in the box's centred, yaw-aligned (l, w, h) frame."""
    center = np.array([box.cx, box.cy, box.cz])
    return (points - center) @ rotation(box.yaw)


def points_in_box(points: np.ndarray, box: Box3D, local: np.ndarray | None = None) -> np.ndarray:
    local = to_box_frame(points, box) if local is None else local
    half = np.array([box.l, box.w, box.h]) * 0.5
    return np.all(np.abs(local) <= half, axis=1)


def draw_scales(rng: np.random.Generator, rng_range: ScaleRange) -> np.ndarray:
    return np.array([rng.uniform(*rng_range.r_l), rng.uniform(*rng_range.r_w),
                     rng.uniform(*rng_range.r_h)])


def ros_transform(points: np.ndarray, labels, scale_range: ScaleRange, seed,
                  scales: np.ndarray | None = None):
    """Scale each labelled object's interior points and its box about the box centre.

    A point inside several boxes follows the box whose centre is nearest.
    ``scales`` (n_boxes, 3) overrides the random draws. Returns new
    (points, labels); points outside every box keep their exact bits.
    """
    points = np.asarray(points)
    labels = list(labels)
    if scales is None:
        rng = stream(*seed, "ros") if isinstance(seed, tuple) else stream(seed, "ros")
        scales = np.array([draw_scales(rng, scale_range) for _ in labels]).reshape(-1, 3)
    out = points.copy()
    if not labels or len(points) == 0:
        return out, [replace(b, l=b.l * s[0], w=b.w * s[1], h=b.h * s[2])
                     for b, s in zip(labels, scales)]
    pts = points.astype(np.float64)
    owner = np.full(len(pts), -1)
    best = np.full(len(pts), np.inf)
    locals_ = []
    for j, box in enumerate(labels):
        local = to_box_frame(pts, box)
        locals_.append(local)
        inside = points_in_box(pts, box, local)
        dist = np.hypot(pts[:, 0] - box.cx, pts[:, 1] - box.cy) ** 2 + (pts[:, 2] - box.cz) ** 2
        take = inside & (dist < best)
        owner[take] = j
        best[take] = dist[take]
    new_labels = []
    for j, box in enumerate(labels):
        s = scales[j]
        idx = np.flatnonzero(owner == j)
        if len(idx):
            # displacement form keeps unit scales bit-exact
            delta = ((s - 1.0) * locals_[j][idx]) @ rotation(box.yaw).T
            out[idx] = (pts[idx] + delta).astype(points.dtype)
        new_labels.append(replace(box, l=box.l * s[0], w=box.w * s[1], h=box.h * s[2]))
    return out, new_labels
