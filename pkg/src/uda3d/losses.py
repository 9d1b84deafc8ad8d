"""Detection loss terms and their weighted, domain-routed combination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .geometry import decode_arrays, iou_bev_arrays

PROB_EPS = 1e-7
TERMS = ("cls", "reg", "reg_filtered", "iou", "dir")
# which lambda weights each term
TERM_WEIGHT = {"cls": 0, "reg": 1, "reg_filtered": 1, "iou": 2, "dir": 3, "rs": 4}
SIZE_COLUMNS = (3, 4, 5)
FILTER_MASK = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0])


@dataclass
class LossConfig:
    lambdas: tuple[float, float, float, float, float] = (1.0, 2.0, 1.0, 0.2, 1.0)
    alpha: float = 0.25
    gamma: float = 2.0
    source_terms: frozenset = frozenset({"cls", "reg_filtered", "iou", "dir"})
    target_terms: frozenset = frozenset({"reg_filtered", "iou", "dir"})
    reg_beta: float = 1.0  # smooth-L1 transition for box regression
    # decode boxes with anchor sizes when no domain trains the size channels
    anchor_sizes: bool = False

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.source_terms = frozenset(self.source_terms)
        self.target_terms = frozenset(self.target_terms)
        if len(self.lambdas) != 5 or min(self.lambdas) < 0:
            raise ValueError("need five non-negative lambda weights")
        for terms in (self.source_terms, self.target_terms):
            bad = set(terms) - set(TERMS)
            if bad:
                raise ValueError(f"unknown loss terms {sorted(bad)}")
            if {"reg", "reg_filtered"} <= set(terms):
                raise ValueError("reg and reg_filtered are mutually exclusive")

    @property
    def scale_filtered(self) -> bool:
        """True when no domain trains the size channels."""
        return "reg" not in self.source_terms | self.target_terms

    @property
    def decode_anchor_sizes(self) -> bool:
        return self.anchor_sizes and self.scale_filtered

    def terms_for(self, domain: str) -> frozenset:
        return self.source_terms if domain == "S" else self.target_terms

    def weight(self, term: str) -> float:
        return self.lambdas[TERM_WEIGHT[term]]

    def to_dict(self) -> dict:
        return {"lambdas": list(self.lambdas), "alpha": self.alpha, "gamma": self.gamma,
                "source_terms": sorted(self.source_terms), "target_terms": sorted(self.target_terms),
                "reg_beta": self.reg_beta, "anchor_sizes": self.anchor_sizes}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(lambdas=tuple(d.get("lambdas", (1.0, 2.0, 1.0, 0.2, 1.0))),
                   alpha=d.get("alpha", 0.25), gamma=d.get("gamma", 2.0),
                   source_terms=frozenset(d.get("source_terms", ("cls", "reg_filtered", "iou", "dir"))),
                   target_terms=frozenset(d.get("target_terms", ("reg_filtered", "iou", "dir"))),
                   reg_beta=d.get("reg_beta", 1.0), anchor_sizes=d.get("anchor_sizes", False))


def _row(src: str, tgt: str) -> tuple[frozenset, frozenset]:
    # angle classification is always on in the single-stage detector
    conv = {"cls": "cls", "reg": "reg", "S_filter": "reg_filtered", "IoU": "iou"}
    parse = lambda s: frozenset(conv[t] for t in s.split("+")) | {"dir"}
    return parse(src), parse(tgt)


ROUTING_ABLATIONS = {
    "cls+reg+IoU | cls+reg+IoU": _row("cls+reg+IoU", "cls+reg+IoU"),
    "cls+IoU | cls+reg+IoU": _row("cls+IoU", "cls+reg+IoU"),
    "cls+IoU | reg+IoU": _row("cls+IoU", "reg+IoU"),
    "cls+S_filter+IoU | cls+S_filter+IoU": _row("cls+S_filter+IoU", "cls+S_filter+IoU"),
    "cls+IoU | cls+S_filter+IoU": _row("cls+IoU", "cls+S_filter+IoU"),
    "cls+S_filter+IoU | S_filter+IoU": _row("cls+S_filter+IoU", "S_filter+IoU"),
}


@dataclass
class LossEntry:
    term: str
    domain: str
    value: float
    weight: float


@dataclass
class LossReport:
    entries: list[LossEntry] = field(default_factory=list)
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        out = {f"{e.term}_{e.domain}": e.value for e in self.entries}
        out["total"] = self.total
        return out

    def domains_for(self, term_kind: str) -> set[str]:
        return {e.domain for e in self.entries if e.term.startswith(term_kind)}


# ---------------------------------------------------------------- elementwise pieces

def smooth_l1(diff: Tensor, beta: float = 1.0) -> Tensor:
    """Huber-style smooth L1 with transition at ``beta``, built from autograd ops."""
    a = ag.abs_(diff)
    c = ag.clip(a, 0.0, beta)
    return ag.mul(ag.mul(c, c), 0.5 / beta) + (a - c)


def focal_terms(p: Tensor, y: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-element focal loss for probabilities ``p`` and binary labels ``y``."""
    p = ag.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    pos = ag.power(1.0 - p, gamma) * ag.log(p) * (-alpha)
    neg = ag.power(p, gamma) * ag.log(1.0 - p) * (-(1.0 - alpha))
    return pos * y + neg * (1.0 - y)


def focal_loss(logits: Tensor, labels: np.ndarray, alpha: float = 0.25, gamma: float = 2.0,
               normalizer: float | None = None) -> Tensor:
    """Sigmoid focal loss over anchors labelled 1/0 (-1 is ignored).

    Summed over cared-for anchors and divided by the positive count (at least 1).
    """
    labels = np.asarray(labels).reshape(-1)
    care = (labels >= 0).astype(np.float64)
    flat = ag.reshape(logits, (-1,))
    terms = focal_terms(ag.sigmoid(flat), labels == 1, alpha, gamma) * care
    if normalizer is None:
        normalizer = max(1.0, float((labels == 1).sum()))
    return ag.mul(ag.reduce_sum(terms), 1.0 / normalizer)


def reg_loss_filtered(pred: Tensor, target: np.ndarray, filtered: bool, beta: float = 1.0) -> Tensor:
    """Smooth-L1 over the (P, 7) positive-anchor regression rows.

    In filtered mode only (x, y, z, theta) contribute; the size columns get
    an exactly zero gradient.
    """
    if pred.shape[0] == 0:
        return Tensor(0.0)
    per = smooth_l1(pred - Tensor(target), beta)
    if filtered:
        per = per * FILTER_MASK
    return ag.mul(ag.reduce_sum(per), 1.0 / pred.shape[0])


def dir_loss(dir_logits: Tensor, bins: np.ndarray) -> Tensor:
    """Softmax cross-entropy over (P, n_dir) direction logits."""
    if dir_logits.shape[0] == 0:
        return Tensor(0.0)
    logp = ag.log_softmax(dir_logits, axis=-1)
    onehot = np.eye(dir_logits.shape[1])[np.asarray(bins)]
    return ag.mul(ag.reduce_sum(logp * onehot), -1.0 / dir_logits.shape[0])


def iou_loss(iou_pred: Tensor, iou_target: np.ndarray) -> Tensor:
    if iou_pred.shape[0] == 0:
        return Tensor(0.0)
    per = smooth_l1(iou_pred - Tensor(iou_target))
    return ag.mul(ag.reduce_sum(per), 1.0 / iou_pred.shape[0])


# ---------------------------------------------------------------- per-domain terms

def iou_targets(pred_reg: np.ndarray, anchors: np.ndarray, gt: np.ndarray,
                scale_filtered: bool = False) -> np.ndarray:
    """BEV IoU between detached decoded predictions and their matched labels."""
    if len(gt) == 0:
        return np.zeros(0)
    boxes = decode_arrays(pred_reg, anchors, scale_filtered)
    boxes[:, 3:6] = np.clip(boxes[:, 3:6], 1e-3, 1e3)
    out = np.empty(len(gt))
    for i in range(len(gt)):
        out[i] = iou_bev_arrays(boxes[i:i + 1], gt[i:i + 1])[0, 0]
    return out


def detection_terms(outputs, targets, anchors_flat: np.ndarray, terms, cfg: LossConfig) -> dict:
    """Compute the routed detection losses for one domain's batch.

    ``targets`` is a list of per-scene ``Targets``; returns term -> Tensor.
    """
    n = outputs.cls_logits.shape[0]
    m = anchors_flat.shape[0]
    labels = np.concatenate([t.labels for t in targets])
    pos_scene = [t.positives + i * m for i, t in enumerate(targets)]
    pos = np.concatenate(pos_scene) if pos_scene else np.zeros(0, dtype=np.int64)
    num_pos = len(pos)
    out: dict[str, Tensor] = {}
    if "cls" in terms:
        out["cls"] = focal_loss(outputs.cls_logits, labels, cfg.alpha, cfg.gamma)
    need_pos = {"reg", "reg_filtered", "iou", "dir"} & set(terms)
    if not need_pos:
        return out
    reg_t = np.concatenate([t.reg for t in targets])[pos]
    bins = np.concatenate([t.dir_bins for t in targets])[pos]
    gt = np.concatenate([t.gt for t in targets])[pos]
    anc = np.tile(anchors_flat, (n, 1))[pos]
    reg_all = ag.reshape(outputs.reg, (n * m, 7))
    pred = ag.take(reg_all, pos) if num_pos else Tensor(np.zeros((0, 7)))
    if "reg" in terms:
        out["reg"] = reg_loss_filtered(pred, reg_t, False, cfg.reg_beta)
    if "reg_filtered" in terms:
        out["reg_filtered"] = reg_loss_filtered(pred, reg_t, True, cfg.reg_beta)
    if "dir" in terms:
        nd = outputs.dir_logits.shape[-1]
        d_all = ag.reshape(outputs.dir_logits, (n * m, nd))
        out["dir"] = dir_loss(ag.take(d_all, pos) if num_pos else Tensor(np.zeros((0, nd))), bins)
    if "iou" in terms:
        i_all = ag.reshape(outputs.iou_pred, (n * m,))
        target = iou_targets(pred.data, anc, gt, scale_filtered=cfg.anchor_sizes and "reg" not in terms)
        out["iou"] = iou_loss(ag.take(i_all, pos) if num_pos else Tensor(np.zeros(0)), target)
    return out


def total_loss(domain_terms: dict[str, dict[str, Tensor]], cfg: LossConfig):
    """Weighted sum over {"S": {term: loss}, "T": {...}}; returns (Tensor, LossReport).

    Terms not routed for a domain by ``cfg`` are dropped. The adversarial
    term is keyed ``"rs"`` and is always routed.
    """
    report = LossReport()
    total = Tensor(0.0)
    for domain in ("S", "T"):
        allowed = cfg.terms_for(domain) | {"rs"}
        for term, value in domain_terms.get(domain, {}).items():
            if term not in allowed:
                continue
            w = cfg.weight(term)
            total = total + ag.mul(value, w)
            report.entries.append(LossEntry(term, domain, value.item(), w))
    report.total = total.item()
    if not math.isfinite(report.total):
        raise ag.NumericalError("total loss is not finite")
    return total, report
