"""Gravity-aligned 3D box geometry: corners, rotated IoU, anchor encoding."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

AREA_EPS = 1e-12
BOX_FIELDS = ("cx", "cy", "cz", "l", "w", "h", "yaw", "class_id", "score")


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    y = math.remainder(float(yaw), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        for name in ("l", "w", "h"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"box dimension {name} must be positive, got {v}")
        for name in ("cx", "cy", "cz", "yaw"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box field {name} must be finite")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_range(self) -> tuple[float, float]:
        return self.cz - 0.5 * self.h, self.cz + 0.5 * self.h

    def with_score(self, score: float | None) -> "Box3D":
        return replace(self, score=score)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, arr, class_id: int = 0, score: float | None = None) -> "Box3D":
        a = [float(v) for v in arr[:7]]
        return cls(*a, class_id=class_id, score=score)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        kw = {k: d[k] for k in BOX_FIELDS if k in d}
        if kw.get("score") is not None:
            kw["score"] = float(kw["score"])
        return cls(**kw)


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """Stack boxes into an (n, 7) float array (cx, cy, cz, l, w, h, yaw)."""
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.to_array() for b in boxes])


def boxes_to_json(boxes: Iterable[Box3D]) -> str:
    return json.dumps([b.to_dict() for b in boxes])


def boxes_from_json(text: str) -> list[Box3D]:
    return [Box3D.from_dict(d) for d in json.loads(text)]


def boxes_to_csv(boxes: Iterable[Box3D]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BOX_FIELDS)
    for b in boxes:
        row = [repr(getattr(b, k)) if k != "score" else ("" if b.score is None else repr(b.score))
               for k in BOX_FIELDS]
        writer.writerow(row)
    return buf.getvalue()


def boxes_from_csv(text: str) -> list[Box3D]:
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        out.append(Box3D(
            cx=float(row["cx"]), cy=float(row["cy"]), cz=float(row["cz"]),
            l=float(row["l"]), w=float(row["w"]), h=float(row["h"]),
            yaw=float(row["yaw"]), class_id=int(row["class_id"]),
            score=float(row["score"]) if row["score"] != "" else None,
        ))
    return out


# ---------------------------------------------------------------- polygons

def _corners(cx, cy, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((cx + dx * c - dy * s, cy + dx * s + dy * c))
    return out


def bev_corners(box: Box3D) -> list[tuple[float, float]]:
    """Footprint corners, counter-clockwise, starting at the front-left."""
    return _corners(box.cx, box.cy, box.l, box.w, box.yaw)


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman: clip ``subject`` against convex CCW ``clipper``."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0.0:
                if dp < 0.0:
                    t = dp / (dp - dq)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif dp >= 0.0:
                t = dp / (dp - dq)
                output.append((px + t * (qx - px), py + t * (qy - py)))
    return output


def _bev_intersection(a, b) -> float:
    # a, b: (cx, cy, l, w, yaw); clip in a canonical order so the result is exactly symmetric
    if tuple(b) < tuple(a):
        a, b = b, a
    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    pa = _corners(*a)
    pb = _corners(*b)
    area = polygon_area(clip_polygon(pa, pb))
    return area if area > AREA_EPS else 0.0


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return _bev_intersection((a.cx, a.cy, a.l, a.w, a.yaw), (b.cx, b.cy, b.l, b.w, b.yaw))


def iou_bev(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    a0, a1 = a.z_range
    b0, b1 = b.z_range
    dz = min(a1, b1) - max(a0, b0)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= AREA_EPS:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(memory: Sequence[Box3D], current: Sequence[Box3D], kind: str = "3d") -> np.ndarray:
    """Pairwise IoU, shape (len(memory), len(current))."""
    fn = iou_3d if kind == "3d" else iou_bev
    out = np.zeros((len(memory), len(current)))
    for e, m in enumerate(memory):
        for f, c in enumerate(current):
            out[e, f] = fn(m, c)
    return out


def iou_bev_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """BEV IoU between rows of (n, 7) and (m, 7) box arrays."""
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    # cheap circumradius rejection before any clipping
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    cand = np.argwhere(dist < ra[:, None] + rb[None, :])
    al = a.tolist()
    bl = b.tolist()
    for i, j in cand:
        ai, bj = al[i], bl[j]
        inter = _bev_intersection((ai[0], ai[1], ai[3], ai[4], ai[6]),
                                  (bj[0], bj[1], bj[3], bj[4], bj[6]))
        if inter > 0.0:
            out[i, j] = inter / (ai[3] * ai[4] + bj[3] * bj[4] - inter)
    return out


def iou_3d_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3D IoU between rows of (n, 7) and (m, 7) box arrays."""
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    top = np.minimum(a[:, None, 2] + 0.5 * a[:, None, 5], b[None, :, 2] + 0.5 * b[None, :, 5])
    bot = np.maximum(a[:, None, 2] - 0.5 * a[:, None, 5], b[None, :, 2] - 0.5 * b[None, :, 5])
    dz = top - bot
    cand = np.argwhere((dist < ra[:, None] + rb[None, :]) & (dz > 0))
    al = a.tolist()
    bl = b.tolist()
    for i, j in cand:
        ai, bj = al[i], bl[j]
        inter = _bev_intersection((ai[0], ai[1], ai[3], ai[4], ai[6]),
                                  (bj[0], bj[1], bj[3], bj[4], bj[6])) * dz[i, j]
        if inter > AREA_EPS:
            va = ai[3] * ai[4] * ai[5]
            vb = bj[3] * bj[4] * bj[5]
            out[i, j] = inter / (va + vb - inter)
    return out


# ---------------------------------------------------------------- encoding

@dataclass(frozen=True)
class RegressionTarget:
    x_t: float = 0.0
    y_t: float = 0.0
    z_t: float = 0.0
    l_t: float = 0.0
    w_t: float = 0.0
    h_t: float = 0.0
    theta_t: float = 0.0
    scale_filtered: bool = field(default=False)

    def __post_init__(self):
        if not -1.0 <= self.theta_t <= 1.0:
            raise ValueError("theta_t is a sine and must lie in [-1, 1]")
        if self.scale_filtered and (self.l_t, self.w_t, self.h_t) != (0.0, 0.0, 0.0):
            raise ValueError("scale-filtered targets carry zero size components")

    def to_array(self) -> np.ndarray:
        return np.array([self.x_t, self.y_t, self.z_t, self.l_t, self.w_t, self.h_t, self.theta_t])

    @classmethod
    def from_array(cls, arr, scale_filtered: bool = False) -> "RegressionTarget":
        return cls(*[float(v) for v in arr[:7]], scale_filtered=scale_filtered)


def encode_arrays(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized anchor-relative encoding; columns (x, y, z, l, w, h, theta)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.any(anchors[..., 3:6] <= 0):
        raise ValueError("anchor dimensions must be positive")
    d_a = np.sqrt(anchors[..., 3] ** 2 + anchors[..., 4] ** 2)
    out = np.empty(np.broadcast_shapes(gt.shape, anchors.shape))
    out[..., 0] = (gt[..., 0] - anchors[..., 0]) / d_a
    out[..., 1] = (gt[..., 1] - anchors[..., 1]) / d_a
    out[..., 2] = (gt[..., 2] - anchors[..., 2]) / anchors[..., 5]
    out[..., 3] = np.log(gt[..., 3] / anchors[..., 3])
    out[..., 4] = np.log(gt[..., 4] / anchors[..., 4])
    out[..., 5] = np.log(gt[..., 5] / anchors[..., 5])
    out[..., 6] = np.sin(gt[..., 6] - anchors[..., 6])
    return out


def decode_arrays(t: np.ndarray, anchors: np.ndarray, scale_filtered=False) -> np.ndarray:
    """Inverse of :func:`encode_arrays`; yaw lands within pi/2 of the anchor's."""
    t = np.asarray(t, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    d_a = np.sqrt(anchors[..., 3] ** 2 + anchors[..., 4] ** 2)
    out = np.empty(np.broadcast_shapes(t.shape, anchors.shape))
    out[..., 0] = t[..., 0] * d_a + anchors[..., 0]
    out[..., 1] = t[..., 1] * d_a + anchors[..., 1]
    out[..., 2] = t[..., 2] * anchors[..., 5] + anchors[..., 2]
    filt = np.broadcast_to(np.asarray(scale_filtered, dtype=bool), out.shape[:-1])
    for k in (3, 4, 5):
        out[..., k] = np.where(filt, anchors[..., k], anchors[..., k] * np.exp(t[..., k]))
    out[..., 6] = anchors[..., 6] + np.arcsin(np.clip(t[..., 6], -1.0, 1.0))
    return out


def encode(gt: Box3D, anchor: Box3D) -> RegressionTarget:
    if min(anchor.l, anchor.w, anchor.h) <= 0:
        raise ValueError("anchor dimensions must be positive")
    return RegressionTarget.from_array(encode_arrays(gt.to_array(), anchor.to_array()))


def decode(t: RegressionTarget, anchor: Box3D) -> Box3D:
    arr = decode_arrays(t.to_array(), anchor.to_array(), t.scale_filtered)
    return Box3D.from_array(arr, class_id=anchor.class_id)


def filter_scale(t: RegressionTarget) -> RegressionTarget:
    """Drop the size components so only position and heading are regressed."""
    return replace(t, l_t=0.0, w_t=0.0, h_t=0.0, scale_filtered=True)
