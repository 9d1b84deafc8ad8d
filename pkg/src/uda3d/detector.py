"""Tiny anchor-based BEV detector: pillar grid, conv backbone, 1x1 heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import Box3D, decode_arrays, encode_arrays, iou_bev_arrays

N_FEATURES = 5
TIE_EPS = 1e-12


@dataclass(frozen=True)
class AnchorClass:
    name: str
    l: float
    w: float
    h: float
    pos_thresh: float
    neg_thresh: float

    @property
    def z(self) -> float:
        # objects rest on the ground plane z = 0
        return 0.5 * self.h


DEFAULT_CLASSES = (
    AnchorClass("car", 4.2, 1.8, 1.6, 0.6, 0.45),
    AnchorClass("pedestrian", 0.8, 0.6, 1.75, 0.5, 0.35),
    AnchorClass("cyclist", 1.8, 0.6, 1.7, 0.5, 0.35),
)


@dataclass
class DetectorConfig:
    grid: int = 16
    extent: float = 10.0  # grid covers [-extent, extent] in x and y
    channels: int = 32
    n_dir: int = 2
    classes: tuple[AnchorClass, ...] = DEFAULT_CLASSES
    max_height: float = 4.0

    @property
    def cell_size(self) -> float:
        return 2.0 * self.extent / self.grid

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def anchors_per_cell(self) -> int:
        return self.num_classes * self.n_dir

    def to_dict(self) -> dict:
        return {
            "grid": self.grid, "extent": self.extent, "channels": self.channels,
            "n_dir": self.n_dir, "max_height": self.max_height,
            "classes": [vars(c) for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(AnchorClass(**c) for c in d["classes"])
        return cls(**d)


# ---------------------------------------------------------------- pillars

@dataclass
class BEVGrid:
    counts: np.ndarray  # (H, W)
    max_z: np.ndarray
    sum_z: np.ndarray
    sum_dx: np.ndarray
    sum_dy: np.ndarray
    cell_size: float
    dropped: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def features(self) -> np.ndarray:
        """(H, W, 5) network input: log count, max z, mean z, mean in-cell offsets."""
        n = np.maximum(self.counts, 1)
        occ = self.counts > 0
        return np.stack([
            np.log1p(self.counts),
            np.where(occ, self.max_z, 0.0),
            self.sum_z / n,
            self.sum_dx / n,
            self.sum_dy / n,
        ], axis=-1)


def _cell_index(u: np.ndarray, size: int) -> np.ndarray:
    # boundary points belong to the lower-index cell
    return np.clip(np.ceil(u).astype(np.int64) - 1, 0, size - 1)


def pillarize(points: np.ndarray, cfg: DetectorConfig) -> BEVGrid:
    """Bin (n, 3) points into the BEV grid; out-of-range points are dropped."""
    g, cell = cfg.grid, cfg.cell_size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ux = (pts[:, 0] + cfg.extent) / cell
    uy = (pts[:, 1] + cfg.extent) / cell
    keep = (ux >= 0) & (ux <= g) & (uy >= 0) & (uy <= g) & (pts[:, 2] <= cfg.max_height)
    pts, ux, uy = pts[keep], ux[keep], uy[keep]
    col = _cell_index(ux, g)
    row = _cell_index(uy, g)
    flat = row * g + col
    counts = np.bincount(flat, minlength=g * g).astype(np.float64)
    max_z = np.full(g * g, -np.inf)
    np.maximum.at(max_z, flat, pts[:, 2])
    sum_z = np.bincount(flat, weights=pts[:, 2], minlength=g * g)
    sum_dx = np.bincount(flat, weights=ux - col - 0.5, minlength=g * g)
    sum_dy = np.bincount(flat, weights=uy - row - 0.5, minlength=g * g)
    max_z[counts == 0] = 0.0
    shape = (g, g)
    return BEVGrid(counts.reshape(shape), max_z.reshape(shape), sum_z.reshape(shape),
                   sum_dx.reshape(shape), sum_dy.reshape(shape), cell, int((~keep).sum()))


# ---------------------------------------------------------------- anchors

@dataclass
class AnchorSet:
    boxes: np.ndarray  # (H, W, A, 7), anchor index a = class * n_dir + rotation
    class_ids: np.ndarray  # (A,)
    n_dir: int

    @property
    def count(self) -> int:
        return int(np.prod(self.boxes.shape[:3]))

    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 7)

    def flat_classes(self) -> np.ndarray:
        h, w, a, _ = self.boxes.shape
        return np.broadcast_to(self.class_ids, (h, w, a)).reshape(-1)


def make_anchors(cfg: DetectorConfig) -> AnchorSet:
    g, cell = cfg.grid, cfg.cell_size
    centers = -cfg.extent + (np.arange(g) + 0.5) * cell
    boxes = np.zeros((g, g, cfg.anchors_per_cell, 7))
    cls_ids = np.zeros(cfg.anchors_per_cell, dtype=np.int64)
    for c, ac in enumerate(cfg.classes):
        for r in range(cfg.n_dir):
            a = c * cfg.n_dir + r
            cls_ids[a] = c
            boxes[:, :, a, 0] = centers[None, :]
            boxes[:, :, a, 1] = centers[:, None]
            boxes[:, :, a, 2] = ac.z
            boxes[:, :, a, 3:6] = (ac.l, ac.w, ac.h)
            boxes[:, :, a, 6] = r * math.pi / cfg.n_dir
    return AnchorSet(boxes, cls_ids, cfg.n_dir)


# ---------------------------------------------------------------- network

def init_params(cfg: DetectorConfig, seed: int = 0, prior: float = 0.01) -> dict[str, Tensor]:
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xDE7]))
    d, a = cfg.channels, cfg.anchors_per_cell

    def he(shape, fan_in):
        return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

    p = {
        "conv1.w": he((d, N_FEATURES, 3, 3), N_FEATURES * 9), "conv1.b": np.zeros(d),
        "conv2.w": he((d, d, 3, 3), d * 9), "conv2.b": np.zeros(d),
        "conv3.w": he((d, d, 3, 3), d * 9), "conv3.b": np.zeros(d),
        "cls.w": rng.standard_normal((d, a)) * 0.01,
        "cls.b": np.full(a, -math.log((1 - prior) / prior)),
        "reg.w": rng.standard_normal((d, a * 7)) * 0.01, "reg.b": np.zeros(a * 7),
        "dir.w": rng.standard_normal((d, a * cfg.n_dir)) * 0.01, "dir.b": np.zeros(a * cfg.n_dir),
        "iou.w": rng.standard_normal((d, a)) * 0.01, "iou.b": np.zeros(a),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def zero_params(cfg: DetectorConfig) -> dict[str, Tensor]:
    return {k: Tensor(np.zeros_like(v.data), requires_grad=True, name=k)
            for k, v in init_params(cfg).items()}


@dataclass
class DetectorOutputs:
    features: Tensor  # (N, H, W, d)
    cls_logits: Tensor  # (N, H, W, A)
    reg: Tensor  # (N, H, W, A, 7)
    dir_logits: Tensor  # (N, H, W, A, n_dir)
    iou_pred: Tensor  # (N, H, W, A), in [0, 1]


def _layer(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ag.NumericalError as exc:
        raise ag.NumericalError(f"layer {name}: {exc}") from None


def forward(inputs, params: dict[str, Tensor], cfg: DetectorConfig) -> DetectorOutputs:
    """Run backbone and heads on (N, H, W, 5) inputs (or a single BEVGrid)."""
    if isinstance(inputs, BEVGrid):
        inputs = inputs.features()[None]
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    n, hgt, wid, cin = x.shape
    if (hgt, wid, cin) != (cfg.grid, cfg.grid, N_FEATURES):
        raise ag.ShapeError(f"detector input {x.shape} does not match grid config {cfg.grid}")
    a, nd = cfg.anchors_per_cell, cfg.n_dir
    for i in (1, 2, 3):
        x = _layer(f"conv{i}", ag.conv2d, x, params[f"conv{i}.w"], params[f"conv{i}.b"], padding=1)
        x = _layer(f"relu{i}", ag.relu, x)
    feats = x
    cls = _layer("cls_head", lambda: ag.matmul(feats, params["cls.w"]) + params["cls.b"])
    reg = _layer("reg_head", lambda: ag.matmul(feats, params["reg.w"]) + params["reg.b"])
    drl = _layer("dir_head", lambda: ag.matmul(feats, params["dir.w"]) + params["dir.b"])
    iou = _layer("iou_head", lambda: ag.sigmoid(ag.matmul(feats, params["iou.w"]) + params["iou.b"]))
    return DetectorOutputs(
        features=feats,
        cls_logits=cls,
        reg=ag.reshape(reg, (n, hgt, wid, a, 7)),
        dir_logits=ag.reshape(drl, (n, hgt, wid, a, nd)),
        iou_pred=iou,
    )


# ---------------------------------------------------------------- targets

def direction_bin(yaw, n_dir: int = 2, offset: float = 0.0):
    period = 2.0 * math.pi / n_dir
    rot = np.mod(np.asarray(yaw) - offset, 2.0 * math.pi)
    return np.minimum((rot // period).astype(np.int64), n_dir - 1)


def apply_direction(yaw, bins, n_dir: int = 2, offset: float = 0.0):
    """Fold a decoded yaw into the half-turn selected by the direction bin."""
    period = 2.0 * math.pi / n_dir
    folded = np.mod(np.asarray(yaw) - offset, period)
    out = folded + offset + period * np.asarray(bins)
    return np.mod(out + math.pi, 2.0 * math.pi) - math.pi


@dataclass
class Targets:
    labels: np.ndarray  # (M,) 1 positive, 0 negative, -1 ignored
    matched: np.ndarray  # (M,) index into the label list, -1 if none
    reg: np.ndarray  # (M, 7)
    dir_bins: np.ndarray  # (M,)
    gt: np.ndarray  # (M, 7) matched label box

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


def _nearest_anchor(anchors: np.ndarray, box: np.ndarray, claimed: set) -> int:
    # small objects can fall between anchors with zero BEV overlap
    d = np.round(np.hypot(anchors[:, 0] - box[0], anchors[:, 1] - box[1]), 9)
    dyaw = np.round(np.abs(np.sin(anchors[:, 6] - box[6])), 9)
    order = np.lexsort((dyaw, d))
    for k in order[:8]:
        if int(k) not in claimed:
            return int(k)
    return -1


def assign_targets(labels, anchors: AnchorSet, cfg: DetectorConfig) -> Targets:
    """Standard per-class max-IoU anchor matching (BEV IoU)."""
    flat = anchors.flat()
    acls = anchors.flat_classes()
    m = len(flat)
    out_labels = np.zeros(m, dtype=np.int64)
    matched = np.full(m, -1, dtype=np.int64)
    lab_arr = np.array([b.to_array() for b in labels]).reshape(-1, 7)
    lab_cls = np.array([b.class_id for b in labels], dtype=np.int64)
    for c, ac in enumerate(cfg.classes):
        li = np.flatnonzero(lab_cls == c)
        if len(li) == 0:
            continue
        ai = np.flatnonzero(acls == c)
        ious = iou_bev_arrays(flat[ai], lab_arr[li])  # (Ma, L)
        best = ious.argmax(axis=1)
        best_iou = ious[np.arange(len(ai)), best]
        cls_lab = np.where(best_iou >= ac.pos_thresh, 1, np.where(best_iou < ac.neg_thresh, 0, -1))
        cls_match = np.where(cls_lab == 1, li[best], -1)
        claimed = set()
        for j in range(len(li)):
            col = ious[:, j]
            # near-equal overlaps count as a tie and go to the lower index
            k = int(np.argmax(col >= col.max() - TIE_EPS))
            if ious[k, j] <= 0.0 or k in claimed:
                k = _nearest_anchor(flat[ai], lab_arr[li[j]], claimed)
                if k < 0:
                    continue
            claimed.add(k)
            cls_lab[k] = 1
            cls_match[k] = li[j]
        out_labels[ai] = cls_lab
        matched[ai] = cls_match
    gt = np.zeros((m, 7))
    reg = np.zeros((m, 7))
    bins = np.zeros(m, dtype=np.int64)
    pos = np.flatnonzero(out_labels == 1)
    if len(pos):
        gt[pos] = lab_arr[matched[pos]]
        # the sine code only inverts for |dyaw| <= pi/2; a half-turn leaves the
        # box unchanged and the heading is carried by the direction bin
        folded = gt[pos].copy()
        dyaw = folded[:, 6] - flat[pos, 6]
        folded[:, 6] = flat[pos, 6] + np.mod(dyaw + 0.5 * math.pi, math.pi) - 0.5 * math.pi
        reg[pos] = encode_arrays(folded, flat[pos])
        bins[pos] = direction_bin(gt[pos, 6], cfg.n_dir)
    return Targets(out_labels, matched, reg, bins, gt)


# ---------------------------------------------------------------- inference

def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy BEV NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            break
        ious = iou_bev_arrays(boxes[i:i + 1], boxes[rest])[0]
        suppressed[rest[ious > iou_thresh]] = True
    return np.array(keep, dtype=np.int64)


def postprocess(cls_logits, reg, dir_logits, iou_pred, anchors: AnchorSet, cfg: DetectorConfig,
                nms_iou: float = 0.1, score_thresh: float = 0.1, pre_nms: int = 128,
                max_det: int = 64, scale_filtered: bool = False) -> list[Box3D]:
    """Decode raw head outputs for one scene into scored boxes.

    With ``scale_filtered`` the size channels are ignored and boxes keep
    their anchor's dimensions.
    """
    cls_logits = np.asarray(cls_logits).reshape(-1)
    probs = np.where(cls_logits >= 0, 1.0 / (1.0 + np.exp(-np.abs(cls_logits))),
                     np.exp(-np.abs(cls_logits)) / (1.0 + np.exp(-np.abs(cls_logits))))
    scores = probs * np.asarray(iou_pred).reshape(-1)
    cand = np.flatnonzero(scores >= score_thresh)
    if len(cand) == 0:
        return []
    cand = cand[np.argsort(-scores[cand], kind="stable")[:pre_nms]]
    flat = anchors.flat()
    boxes = decode_arrays(np.asarray(reg).reshape(-1, 7)[cand], flat[cand], scale_filtered)
    bins = np.asarray(dir_logits).reshape(-1, cfg.n_dir)[cand].argmax(axis=1)
    boxes[:, 6] = apply_direction(boxes[:, 6], bins, cfg.n_dir)
    classes = anchors.flat_classes()[cand]
    out = []
    for c in range(cfg.num_classes):
        idx = np.flatnonzero(classes == c)
        if len(idx) == 0:
            continue
        for k in nms(boxes[idx], scores[cand][idx], nms_iou):
            i = idx[k]
            b = boxes[i]
            if not np.all(np.isfinite(b)) or min(b[3], b[4], b[5]) <= 0:
                continue
            out.append(Box3D.from_array(b, class_id=c, score=float(min(1.0, scores[cand][i]))))
    out.sort(key=lambda b: -b.score)
    return out[:max_det]


def predict(points_or_grid, params, cfg: DetectorConfig, anchors: AnchorSet | None = None,
            nms_iou: float = 0.1, score_thresh: float = 0.1, scale_filtered: bool = False) -> list[Box3D]:
    grid = points_or_grid if isinstance(points_or_grid, BEVGrid) else pillarize(points_or_grid, cfg)
    anchors = anchors or make_anchors(cfg)
    with ag.no_grad():
        out = forward(grid, params, cfg)
    return postprocess(out.cls_logits.data[0], out.reg.data[0], out.dir_logits.data[0],
                       out.iou_pred.data[0], anchors, cfg, nms_iou, score_thresh,
                       scale_filtered=scale_filtered)


def predict_batch(features: np.ndarray, params, cfg: DetectorConfig, anchors: AnchorSet,
                  nms_iou: float = 0.1, score_thresh: float = 0.1,
                  scale_filtered: bool = False) -> list[list[Box3D]]:
    with ag.no_grad():
        out = forward(features, params, cfg)
    return [postprocess(out.cls_logits.data[i], out.reg.data[i], out.dir_logits.data[i],
                        out.iou_pred.data[i], anchors, cfg, nms_iou, score_thresh,
                        scale_filtered=scale_filtered)
            for i in range(features.shape[0])]
