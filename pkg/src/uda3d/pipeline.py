"""Source pre-training, alternating self-training + adversarial adaptation, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import adversarial as adv
from . import autograd as ag
from .augment import ScaleRange, ros_transform
from .autograd import Adam, AdamConfig, Tensor
from .detector import (DetectorConfig, assign_targets, forward, init_params, make_anchors,
                       pillarize, postprocess)
from .evaluation import DEFAULT_THRESHOLDS, EvalReport, closed_gap, evaluate_predictions, pr_curve  # noqa: F401
from .losses import LossConfig, detection_terms, total_loss
from .pseudolabel import MemoryBank, PseudoLabelSet, threshold
from .rng import stream

log = logging.getLogger(__name__)

PRETRAIN_TERMS = frozenset({"cls", "reg", "iou", "dir"})


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    scale_range: ScaleRange = field(default_factory=ScaleRange)
    ros_pretrain: bool = True
    ros_adapt: bool = False
    phi: float = 0.2
    suppression: str = "frs_topk"
    k: float = 0.2
    beta: float = 2.0
    normalize_rs: bool = True
    lambda_g: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    pretrain_lr: float = 3e-3
    pretrain_epochs: int = 30
    adapt_epochs: int = 3
    rounds: int = 3
    batch_size: int = 8
    churn_stop: float = 0.01
    eval_thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS
    nms_iou: float = 0.1
    eval_score_thresh: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.suppression not in adv.SUPPRESSION_MODES:
            raise ValueError(f"suppression must be one of {adv.SUPPRESSION_MODES}")
        if not 0.0 < self.k <= 1.0:
            raise ValueError("k must lie in (0, 1]")
        if not all(0.0 < t <= 1.0 for t in self.eval_thresholds):
            raise ValueError("evaluation IoU thresholds must lie in (0, 1]")
        if self.batch_size < 1 or self.rounds < 0:
            raise ValueError("batch_size must be >= 1 and rounds >= 0")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items()
             if k not in ("detector", "scale_range", "loss", "optimizer")}
        d["detector"] = self.detector.to_dict()
        d["scale_range"] = self.scale_range.to_dict()
        d["loss"] = self.loss.to_dict()
        d["optimizer"] = asdict(self.optimizer)
        d["eval_thresholds"] = list(self.eval_thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "detector" in d:
            d["detector"] = DetectorConfig.from_dict(d["detector"])
        if "scale_range" in d:
            d["scale_range"] = ScaleRange.from_dict(d["scale_range"])
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "optimizer" in d:
            d["optimizer"] = AdamConfig(**d["optimizer"])
        if "eval_thresholds" in d:
            d["eval_thresholds"] = tuple(d["eval_thresholds"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------- helpers

class TrainingLog:
    """Per-step CSV of every loss term plus the learning rate."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None

    def append(self, step: int, phase: str, report, lr: float) -> None:
        row = {"step": step, "phase": phase, "lr": lr}
        row.update(report.as_dict())
        self.rows.append(row)

    def write(self) -> None:
        if not self.path or not self.rows:
            return
        keys = ["step", "phase", "lr"]
        for r in self.rows:
            keys += [k for k in r if k not in keys]
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, restval="")
            w.writeheader()
            w.writerows(self.rows)


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def prepare(points, labels, cfg: DetectorConfig, anchors):
    return pillarize(points, cfg).features(), assign_targets(labels, anchors, cfg)


class SceneCache:
    """Features and anchor targets per (scene, label version)."""

    def __init__(self, cfg: DetectorConfig, anchors):
        self.cfg = cfg
        self.anchors = anchors
        self._feat: dict = {}
        self._targets: dict = {}

    def features(self, key, points) -> np.ndarray:
        if key not in self._feat:
            self._feat[key] = pillarize(points, self.cfg).features()
        return self._feat[key]

    def targets(self, key, labels):
        if key not in self._targets:
            self._targets[key] = assign_targets(labels, self.anchors, self.cfg)
        return self._targets[key]

    def drop_targets(self) -> None:
        self._targets.clear()


def _check(report, step: int, phase: str) -> None:
    if not math.isfinite(report.total):
        raise ag.NumericalError(f"{phase} step {step}: non-finite loss")


def _forward(feats, params, cfg: DetectorConfig, step: int, phase: str):
    try:
        return forward(np.stack(feats), params, cfg)
    except ag.NumericalError as exc:
        raise ag.NumericalError(f"{phase} step {step}: {exc}") from None


def _optimizer_step(opt: Adam, loss: Tensor, step: int, phase: str) -> float:
    opt.zero_grad()
    try:
        ag.backward(loss)
    except ag.NumericalError as exc:
        raise ag.NumericalError(f"{phase} step {step}: {exc}") from None
    return opt.step()


# ---------------------------------------------------------------- pretraining

def pretrain(source, config: RunConfig, log_path=None, checkpoint=None, params=None):
    """Supervised source training (with random object scaling); returns parameters."""
    cfg = config.detector
    anchors = make_anchors(cfg)
    anchors_flat = anchors.flat()
    params = copy_params(params) if params is not None else init_params(cfg, config.seed)
    n = len(source)
    steps_per_epoch = math.ceil(n / config.batch_size)
    opt = Adam(params, replace(config.optimizer, lr=config.pretrain_lr),
               total_steps=max(1, config.pretrain_epochs * steps_per_epoch))
    loss_cfg = replace(config.loss, source_terms=PRETRAIN_TERMS)
    cache = SceneCache(cfg, anchors)
    use_ros = config.ros_pretrain and config.scale_range != ScaleRange.identity()
    tlog = TrainingLog(log_path)
    step = 0
    for epoch in range(config.pretrain_epochs):
        for batch in _batches(n, config.batch_size, stream(config.seed, "pretrain-order", epoch)):
            feats, targets = [], []
            for i in batch:
                pts, labels = source.points(int(i)), source.labels(int(i))
                if use_ros:
                    pts, labels = ros_transform(pts, labels, config.scale_range,
                                                (config.seed, epoch, int(i)))
                    f, t = prepare(pts, labels, cfg, anchors)
                else:
                    f = cache.features(int(i), pts)
                    t = cache.targets(int(i), labels)
                feats.append(f)
                targets.append(t)
            out = _forward(feats, params, cfg, step, "pretrain")
            terms = detection_terms(out, targets, anchors_flat, PRETRAIN_TERMS, loss_cfg)
            loss, report = total_loss({"S": terms}, loss_cfg)
            _check(report, step, "pretrain")
            lr = _optimizer_step(opt, loss, step, "pretrain")
            tlog.append(step, "pretrain", report, lr)
            step += 1
    tlog.write()
    if checkpoint:
        ag.save_checkpoint(checkpoint, params, {"stage": "pretrain", "seed": config.seed,
                                                "anchor_sizes": False})
    return params


# ---------------------------------------------------------------- adaptation

@dataclass
class RoundResult:
    round: int
    churn: float
    empty_fraction: float
    pseudo_labels: int
    report: EvalReport | None = None


def _predict_all(params, feats: list[np.ndarray], config: RunConfig, anchors, score_thresh,
                 scale_filtered: bool = False, batch: int = 64):
    cfg = config.detector
    out_boxes = []
    with ag.no_grad():
        for s in range(0, len(feats), batch):
            chunk = np.stack(feats[s:s + batch])
            out = forward(chunk, params, cfg)
            for i in range(chunk.shape[0]):
                out_boxes.append(postprocess(out.cls_logits.data[i], out.reg.data[i],
                                             out.dir_logits.data[i], out.iou_pred.data[i],
                                             anchors, cfg, config.nms_iou, score_thresh,
                                             scale_filtered=scale_filtered))
    return out_boxes


def generate_pseudo_labels(params, target, idx, config: RunConfig, anchors, cache) -> list[PseudoLabelSet]:
    feats = [cache.features(("T", i), target.points(i)) for i in idx]
    dets = _predict_all(params, feats, config, anchors, min(config.phi, 1.0), config.loss.decode_anchor_sizes)
    return [PseudoLabelSet(target.scene_id(i), threshold(d, config.phi)) for i, d in zip(idx, dets)]


def adapt(source, target, params, config: RunConfig, out_dir=None, eval_set=None,
          bank: MemoryBank | None = None):
    """Alternate pseudo-label refresh and joint source/target training.

    ``target`` must be label-withheld; ``eval_set`` (an evaluation view) is
    only touched by :func:`evaluate` after each round. Returns
    (params, round results, bank).
    """
    cfg = config.detector
    anchors = make_anchors(cfg)
    anchors_flat = anchors.flat()
    params = copy_params(params)
    disc = adv.init_discriminator(cfg.channels, config.seed)
    lc = config.loss
    lam_rs = lc.weight("rs")
    use_adv = lam_rs > 0
    use_source = bool(lc.source_terms) or use_adv
    bank = bank or MemoryBank()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    t_idx = target.indices("train")
    cache = SceneCache(cfg, anchors)
    tlog = TrainingLog(out_dir / "adapt_log.csv" if out_dir else None)
    results: list[RoundResult] = []
    step = 0
    for rnd in range(1, config.rounds + 1):
        sets = generate_pseudo_labels(params, target, t_idx, config, anchors, cache)
        bank_size = sum(len(v) for v in bank.entries.values())
        changed = 0
        for s in sets:
            st = bank.integrate(s)
            changed += st.replaced + st.added + st.buffered
        bank.round = rnd
        churn = changed / max(1, bank_size + sum(len(s.boxes) for s in sets if s.scene_id not in bank.entries))
        empty = float(np.mean([len(s.boxes) == 0 for s in sets])) if sets else 1.0
        if rnd == 1 and empty > 0.5:
            log.warning("round 1: %.0f%% of target scenes have no pseudo labels", 100 * empty)
        cache.drop_targets()
        n_steps = config.adapt_epochs * math.ceil(len(t_idx) / config.batch_size)
        all_params = {**params, **disc} if use_adv else params
        opt = Adam(all_params, config.optimizer, total_steps=max(1, n_steps))
        for epoch in range(config.adapt_epochs):
            order_rng = stream(config.seed, "adapt-order", rnd, epoch)
            t_batches = _batches(len(t_idx), config.batch_size, order_rng)
            s_batches = _batches(len(source), config.batch_size, stream(config.seed, "src-order", rnd, epoch))
            for bi, tb in enumerate(t_batches):
                domain_terms = {}
                t_ids = [t_idx[int(j)] for j in tb]
                t_feats, t_targets = [], []
                for i in t_ids:
                    labels = bank.snapshot(target.scene_id(i))
                    pts = target.points(i)
                    if config.ros_adapt:
                        pts, labels = ros_transform(pts, labels, config.scale_range, (config.seed, rnd, epoch, i))
                        f, t = prepare(pts, labels, cfg, anchors)
                    else:
                        f = cache.features(("T", i), pts)
                        t = cache.targets(("T", i), labels)
                    t_feats.append(f)
                    t_targets.append(t)
                t_out = _forward(t_feats, params, cfg, step, "adapt")
                domain_terms["T"] = detection_terms(t_out, t_targets, anchors_flat, lc.target_terms, lc)
                if use_adv:
                    domain_terms["T"]["rs"] = adv.domain_loss(
                        t_out.features, t_out.cls_logits, disc, "T", config.suppression,
                        config.k, config.beta, config.lambda_g, config.normalize_rs)
                if use_source:
                    sb = s_batches[bi % len(s_batches)]
                    s_feats, s_targets = [], []
                    for i in sb:
                        i = int(i)
                        s_feats.append(cache.features(("S", i), source.points(i)))
                        s_targets.append(cache.targets(("S", i), source.labels(i)))
                    s_out = _forward(s_feats, params, cfg, step, "adapt")
                    domain_terms["S"] = detection_terms(s_out, s_targets, anchors_flat, lc.source_terms, lc)
                    if use_adv:
                        domain_terms["S"]["rs"] = adv.domain_loss(
                            s_out.features, s_out.cls_logits, disc, "S", config.suppression,
                            config.k, config.beta, config.lambda_g, config.normalize_rs)
                loss, report = total_loss(domain_terms, lc)
                _check(report, step, "adapt")
                lr = _optimizer_step(opt, loss, step, "adapt")
                tlog.append(step, f"round{rnd}", report, lr)
                step += 1
        res = RoundResult(rnd, churn, empty, sum(len(s.boxes) for s in sets))
        if eval_set is not None:
            res.report = evaluate(params, eval_set, config, anchor_sizes=lc.decode_anchor_sizes)
        results.append(res)
        if out_dir:
            ag.save_checkpoint(out_dir / f"round{rnd}.ckpt", params,
                               {"stage": "adapt", "round": rnd, "anchor_sizes": lc.decode_anchor_sizes})
            bank.save(out_dir / f"bank_round{rnd}.json")
        log.info("round %d: churn %.3f, %d pseudo labels", rnd, churn, res.pseudo_labels)
        if rnd > 1 and churn < config.churn_stop:
            break
    tlog.write()
    return params, results, bank


# ---------------------------------------------------------------- evaluation

def predict_dataset(params, dataset, config: RunConfig, split: str | None = None,
                    anchor_sizes: bool = False):
    anchors = make_anchors(config.detector)
    idx = dataset.indices(split)
    feats = [pillarize(dataset.points(i), config.detector).features() for i in idx]
    return idx, _predict_all(params, feats, config, anchors, config.eval_score_thresh, anchor_sizes)


def evaluate(params, dataset, config: RunConfig, split: str | None = None,
             anchor_sizes: bool = False) -> EvalReport:
    """AP_BEV / AP_3D of ``params`` on a labelled (evaluation-view) dataset.

    ``anchor_sizes`` replaces predicted sizes with the anchor's; adapted
    checkpoints record whether they were trained to be read that way.
    """
    return evaluate_with_curves(params, dataset, config, split, anchor_sizes)[0]


def evaluate_with_curves(params, dataset, config: RunConfig, split: str | None = None,
                         anchor_sizes: bool = False):
    """Report plus {class: {"bev"|"3d": (precision, recall)}} for plotting."""
    idx, preds = predict_dataset(params, dataset, config, split, anchor_sizes)
    gts = [dataset.labels(i) for i in idx]
    names = tuple(c.name for c in config.detector.classes)
    report = evaluate_predictions(preds, gts, config.eval_thresholds, names)
    curves = {n: {kind: pr_curve(preds, gts, c, config.eval_thresholds[c], kind)
                  for kind in ("bev", "3d")}
              for c, n in enumerate(names)}
    return report, curves


# ---------------------------------------------------------------- ablation variants

VARIANTS = ("source_only", "st", "st_bsal", "full")


def variant_config(base: RunConfig, name: str) -> RunConfig:
    """Configuration for one row of the component ablation.

    ``st`` is the adaptation loop with the adversarial weight at zero and
    unfiltered size regression; ``st_bsal`` switches the suppressed
    adversarial term back on; ``full`` further filters box sizes (the
    default routing). ``source_only`` is the pre-trained model itself.
    """
    lam = base.loss.lambdas
    unfiltered = replace(base.loss, source_terms=_unfilter(base.loss.source_terms),
                         target_terms=_unfilter(base.loss.target_terms))
    if name == "source_only":
        return replace(base, rounds=0)
    if name == "st":
        return replace(base, loss=replace(unfiltered, lambdas=lam[:4] + (0.0,)), suppression="none")
    if name == "st_bsal":
        return replace(base, loss=unfiltered)
    if name == "full":
        return base
    raise KeyError(f"unknown variant {name!r}")


def _unfilter(terms) -> frozenset:
    return frozenset("reg" if t == "reg_filtered" else t for t in terms)
