"""Multi-seed studies: the component ablation trend and the no-shift control."""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import autograd as ag
from . import simworld
from .pipeline import VARIANTS, RunConfig, adapt, evaluate, pretrain, variant_config

log = logging.getLogger(__name__)


def experiment_base() -> RunConfig:
    # a gentler reversal weight than the library default; see README
    return RunConfig(lambda_g=0.1)


@dataclass
class StudyConfig:
    preset: str = "size_density_shift"
    n_source: int = 500
    n_target: int = 500
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    base: RunConfig = field(default_factory=experiment_base)
    cache_dir: str | None = None

    def data_seeds(self, seed: int) -> tuple[int, int]:
        return 2 * seed, 2 * seed + 1


@dataclass
class StudyResult:
    per_seed: dict[int, dict[str, float]]
    seconds: float

    def median(self, name: str) -> float:
        return statistics.median(v[name] for v in self.per_seed.values())

    def medians(self) -> dict[str, float]:
        names = next(iter(self.per_seed.values())).keys()
        return {n: self.median(n) for n in names}

    def to_dict(self) -> dict:
        return {"per_seed": {str(k): v for k, v in self.per_seed.items()},
                "medians": self.medians(), "seconds": self.seconds}


def ordering_gaps(medians: dict[str, float], order=VARIANTS) -> list[float]:
    """Consecutive differences along ``order``; all > margin means a strict trend."""
    return [medians[b] - medians[a] for a, b in zip(order, order[1:])]


# fields that only matter after pre-training
ADAPT_ONLY = ("ros_adapt", "phi", "suppression", "k", "beta", "normalize_rs", "lambda_g",
              "adapt_epochs", "rounds", "churn_stop", "eval_thresholds", "nms_iou",
              "eval_score_thresh")


def _cache_key(spec, n: int, data_seed: int, config: RunConfig) -> str:
    cfg = {k: v for k, v in config.to_dict().items() if k not in ADAPT_ONLY}
    blob = json.dumps([spec.to_dict(), n, data_seed, cfg], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def source_model(source, spec, n: int, data_seed: int, config: RunConfig, cache_dir=None):
    """Pre-trained parameters, reused from ``cache_dir`` when the inputs match exactly."""
    path = None
    if cache_dir:
        path = Path(cache_dir) / f"pretrain_{_cache_key(spec, n, data_seed, config)}.ckpt"
        if path.exists():
            return ag.load_checkpoint(path)[0]
        path.parent.mkdir(parents=True, exist_ok=True)
    return pretrain(source, config, checkpoint=path)


def _domains(study: StudyConfig, seed: int):
    src_spec, tgt_spec = simworld.preset(study.preset)
    ds, dt = study.data_seeds(seed)
    src, tgt = simworld.make_domain_pair(src_spec, tgt_spec, (study.n_source, study.n_target), (ds, dt))
    return src_spec, src, tgt


def run_seed(study: StudyConfig, seed: int, variants=VARIANTS) -> dict[str, float]:
    """Target mAP_3D (val split) of each variant, sharing one pre-trained model."""
    src_spec, src, tgt = _domains(study, seed)
    base = replace(study.base, seed=seed)
    params = source_model(src, src_spec, study.n_source, study.data_seeds(seed)[0], base, study.cache_dir)
    ev = tgt.eval_view().subset("val")
    out = {}
    for name in variants:
        cfg = variant_config(base, name)
        if cfg.rounds == 0:
            report = evaluate(params, ev, cfg)
        else:
            _, results, _ = adapt(src, tgt, params, cfg, eval_set=ev)
            report = results[-1].report
        out[name] = float(report.mean_3d)
        log.info("seed %d %s: %.2f", seed, name, out[name])
    return out


def run_study(study: StudyConfig, variants=VARIANTS) -> StudyResult:
    t0 = time.perf_counter()
    per_seed = {s: run_seed(study, s, variants) for s in study.seeds}
    return StudyResult(per_seed, time.perf_counter() - t0)


def run_trend(study: StudyConfig | None = None) -> StudyResult:
    return run_study(study or StudyConfig())


def run_control(study: StudyConfig | None = None) -> StudyResult:
    """Full adaptation against source-only when both domains share one spec."""
    study = study or StudyConfig()
    return run_study(replace(study, preset="identical"), ("source_only", "full"))
