"""Average precision over 40 recall positions and the closed-gap summary."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D, boxes_to_array, iou_3d_arrays, iou_bev_arrays

N_RECALL = 40
DEFAULT_THRESHOLDS = (0.7, 0.5, 0.5)
CLASS_NAMES = ("car", "pedestrian", "cyclist")


def precision_recall(scores, is_tp, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(is_tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = ctp / ranks
    recall = ctp / num_gt if num_gt > 0 else np.zeros_like(ctp)
    return precision, recall


def average_precision_r40(scores, is_tp, num_gt: int) -> float:
    """AP in percent: mean interpolated precision at recall 1/40, 2/40, ..., 1."""
    if num_gt == 0:
        return math.nan
    if len(scores) == 0:
        return 0.0
    precision, recall = precision_recall(scores, is_tp, num_gt)
    # envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, N_RECALL + 1):
        r = k / N_RECALL
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < len(recall):
            total += envelope[idx]
    return 100.0 * total / N_RECALL


def match_scene(dets: list[Box3D], gts: list[Box3D], thresh: float, kind: str = "3d"):
    """Greedy matching by descending score; each ground truth is consumed once."""
    if not dets:
        return [], []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    fn = iou_3d_arrays if kind == "3d" else iou_bev_arrays
    ious = fn(boxes_to_array(dets), boxes_to_array(gts)) if gts else np.zeros((len(dets), 0))
    used = np.zeros(len(gts), dtype=bool)
    tps = []
    for i in range(len(dets)):
        cand = np.where(used, -1.0, ious[i]) if len(gts) else np.zeros(0)
        j = int(cand.argmax()) if len(cand) else -1
        if j >= 0 and cand[j] >= thresh:
            used[j] = True
            tps.append(True)
        else:
            tps.append(False)
    return [d.score for d in dets], tps


def class_ap(predictions, ground_truth, class_id: int, thresh: float, kind: str) -> float:
    scores, tps, num_gt = [], [], 0
    for dets, gts in zip(predictions, ground_truth):
        d = [b for b in dets if b.class_id == class_id]
        g = [b for b in gts if b.class_id == class_id]
        num_gt += len(g)
        s, t = match_scene(d, g, thresh, kind)
        scores.extend(s)
        tps.extend(t)
    return average_precision_r40(scores, tps, num_gt)


def pr_curve(predictions, ground_truth, class_id: int, thresh: float, kind: str):
    scores, tps, num_gt = [], [], 0
    for dets, gts in zip(predictions, ground_truth):
        d = [b for b in dets if b.class_id == class_id]
        g = [b for b in gts if b.class_id == class_id]
        num_gt += len(g)
        s, t = match_scene(d, g, thresh, kind)
        scores.extend(s)
        tps.extend(t)
    return precision_recall(scores, tps, num_gt)


def _nanmean(vals) -> float:
    v = [x for x in vals if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


@dataclass
class EvalReport:
    ap_bev: dict[str, float]
    ap_3d: dict[str, float]
    closed_gap_bev: dict[str, float] = field(default_factory=dict)
    closed_gap_3d: dict[str, float] = field(default_factory=dict)

    @property
    def mean_bev(self) -> float:
        return _nanmean(self.ap_bev.values())

    @property
    def mean_3d(self) -> float:
        return _nanmean(self.ap_3d.values())

    def to_dict(self) -> dict:
        return {"ap_bev": self.ap_bev, "ap_3d": self.ap_3d, "mean_bev": self.mean_bev,
                "mean_3d": self.mean_3d, "closed_gap_bev": self.closed_gap_bev,
                "closed_gap_3d": self.closed_gap_3d}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["ap_bev"], d["ap_3d"], d.get("closed_gap_bev", {}), d.get("closed_gap_3d", {}))

    def with_gaps(self, source_only: "EvalReport", oracle: "EvalReport") -> "EvalReport":
        gb = {c: closed_gap(self.ap_bev[c], source_only.ap_bev[c], oracle.ap_bev[c]) for c in self.ap_bev}
        g3 = {c: closed_gap(self.ap_3d[c], source_only.ap_3d[c], oracle.ap_3d[c]) for c in self.ap_3d}
        return EvalReport(self.ap_bev, self.ap_3d, gb, g3)


def evaluate_predictions(predictions, ground_truth, thresholds=DEFAULT_THRESHOLDS,
                         class_names=CLASS_NAMES) -> EvalReport:
    """AP_BEV and AP_3D per class at the class IoU thresholds (NaN when a class has no GT)."""
    bev, d3 = {}, {}
    for c, name in enumerate(class_names):
        bev[name] = class_ap(predictions, ground_truth, c, thresholds[c], "bev")
        d3[name] = class_ap(predictions, ground_truth, c, thresholds[c], "3d")
    return EvalReport(bev, d3)


def closed_gap(model_ap: float, source_only_ap: float, oracle_ap: float) -> float:
    """Signed share (percent) of the source-only -> oracle gap closed; NaN if undefined."""
    denom = oracle_ap - source_only_ap
    if denom == 0 or any(math.isnan(v) for v in (model_ap, source_only_ap, oracle_ap)):
        return math.nan
    return (model_ap - source_only_ap) / denom * 100.0


def format_gap(value: float) -> str:
    return "undefined" if math.isnan(value) else f"{value:+.2f}%"


def reports_to_markdown(rows: dict[str, EvalReport]) -> str:
    names = list(next(iter(rows.values())).ap_3d) if rows else []
    head = "| Method | " + " | ".join(f"{n} BEV / 3D" for n in names) + " | Mean BEV / 3D |"
    sep = "|" + "---|" * (len(names) + 2)
    lines = [head, sep]
    for method, rep in rows.items():
        cells = [f"{rep.ap_bev[n]:.2f} / {rep.ap_3d[n]:.2f}" for n in names]
        lines.append(f"| {method} | " + " | ".join(cells) + f" | {rep.mean_bev:.2f} / {rep.mean_3d:.2f} |")
    return "\n".join(lines) + "\n"


def reports_to_csv(rows: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "class", "ap_bev", "ap_3d"])
    for method, rep in rows.items():
        for n in rep.ap_3d:
            w.writerow([method, n, f"{rep.ap_bev[n]:.4f}", f"{rep.ap_3d[n]:.4f}"])
        w.writerow([method, "mean", f"{rep.mean_bev:.4f}", f"{rep.mean_3d:.4f}"])
    return buf.getvalue()
