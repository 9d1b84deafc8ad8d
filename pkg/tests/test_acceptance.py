"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with pytest (lines appear in the terminal summary) or directly:
``python3 tests/test_acceptance.py``. Criteria 8 and 9 train real models
and take about half an hour on one core; set UDA3D_CACHE to a directory to
reuse pre-trained source models between runs.
"""

import json
import math
import os
import statistics
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import axis_aligned_iou_bev, monte_carlo_iou, numeric_grad, rel_error  # noqa: E402
from test_autograd import OPS, check_op  # noqa: E402
from test_pseudolabel import test_scripted_three_rounds as scripted_rounds  # noqa: E402

from uda3d import adversarial as adv  # noqa: E402
from uda3d import autograd as ag  # noqa: E402
from uda3d import losses  # noqa: E402
from uda3d.autograd import Tensor  # noqa: E402
from uda3d.cli import EXIT_OK, main  # noqa: E402
from uda3d.detector import DetectorConfig, assign_targets, forward, init_params, make_anchors  # noqa: E402
from uda3d.evaluation import closed_gap  # noqa: E402
from uda3d.experiments import StudyConfig, ordering_gaps, run_control, run_trend  # noqa: E402
from uda3d.geometry import Box3D, decode_arrays, encode_arrays, iou_3d, iou_bev  # noqa: E402
from uda3d.losses import LossConfig, detection_terms, total_loss  # noqa: E402
from uda3d.pipeline import VARIANTS, RunConfig  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
RESULTS: dict[int, str] = {}
_CACHE = os.environ.get("UDA3D_CACHE") or tempfile.mkdtemp(prefix="uda3d-acc-")


def record(n: int, title: str, ok: bool, detail: str = "") -> None:
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}" + (f": {detail}" if detail else "")
    print(RESULTS[n])
    assert ok, RESULTS[n]


def random_box(rng, center_scale=1.0) -> Box3D:
    return Box3D(*rng.uniform(-center_scale, center_scale, 3), *rng.uniform(0.5, 4.0, 3),
                 rng.uniform(-math.pi, math.pi))


# ------------------------------------------------------------------ 1


def test_closed_gap_fixture():
    t0 = time.perf_counter()
    rows = json.loads((FIXTURES / "closed_gap_table.json").read_text())
    bad = []
    for r in rows:
        got = closed_gap(r["model_ap"], r["source_only_ap"], r["oracle_ap"])
        if not abs(got - r["closed_gap"]) <= 0.01:
            bad.append(f"{r['task']}/{r['method']}/{r['cls']}/{r['metric']} {got:.2f} vs {r['closed_gap']}")
    dt = time.perf_counter() - t0
    record(1, "closed gap fixture", not bad and dt < 1.0,
           f"{len(rows) - len(bad)}/{len(rows)} entries within 0.01, {dt:.3f}s"
           + (f"; mismatches: {'; '.join(bad)}" if bad else ""))


# ------------------------------------------------------------------ 2


def test_geometry_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_mc = 0.0
    for i in range(1000):
        a = random_box(rng)
        b = random_box(rng)
        worst_mc = max(worst_mc, abs(iou_3d(a, b) - monte_carlo_iou(a, b, 1_000_000, seed=i)))
    worst_aa = 0.0
    for _ in range(1000):
        a = Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 4.0, 3), 0.0)
        b = Box3D(*rng.uniform(-2, 2, 3), *rng.uniform(0.5, 4.0, 3), 0.0)
        worst_aa = max(worst_aa, abs(iou_bev(a, b) - axis_aligned_iou_bev(a, b)))
    dt = time.perf_counter() - t0
    record(2, "geometry oracle", worst_mc <= 1e-2 and worst_aa <= 1e-9 and dt < 120,
           f"max |3d - MC| {worst_mc:.2e}, max |bev - closed form| {worst_aa:.1e}, {dt:.0f}s")


# ------------------------------------------------------------------ 3


class Replay:
    """Wraps a function so later calls return what the first pass returned, in order.

    Finite differences must not see IoU targets or suppression weights move,
    since both are treated as constants by the analytic gradient.
    """

    def __init__(self, fn):
        self.fn, self.saved, self.i, self.recording = fn, [], 0, True

    def __call__(self, *args, **kw):
        if self.recording:
            self.saved.append(self.fn(*args, **kw))
            return self.saved[-1]
        self.i += 1
        return self.saved[self.i - 1]

    def rewind(self):
        self.recording, self.i = False, 0


def end_to_end_setup(seed=0):
    cfg = DetectorConfig(grid=8, channels=4)
    anchors = make_anchors(cfg)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed + 1)
    for p in params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)
    disc = adv.init_discriminator(cfg.channels, seed=seed + 2)
    labels = [[Box3D(1.0, -2.0, 0.8, 4.0, 1.7, 1.5, 0.4, 0), Box3D(-3, 3, 0.9, 0.7, 0.6, 1.8, 2.0, 1)],
              [Box3D(-2.0, -1.0, 0.8, 1.8, 0.6, 1.7, -0.8, 2)]]
    targets = [assign_targets(lab, anchors, cfg) for lab in labels]
    xs = {"S": rng.standard_normal((2, 8, 8, 5)), "T": rng.standard_normal((2, 8, 8, 5))}
    return cfg, anchors, params, disc, targets, xs


def loss_parts(cfg, anchors, params, disc, targets, xs, lc=LossConfig(), lambda_g=1.0):
    """(detection part, adversarial part) of the total; their sum is the training loss."""
    det, rs = {}, {}
    for d in "ST":
        out = forward(xs[d], params, cfg)
        det[d] = detection_terms(out, targets, anchors.flat(), lc.terms_for(d), lc)
        rs[d] = {"rs": adv.domain_loss(out.features, out.cls_logits, disc, d, lambda_g=lambda_g)}
    return total_loss(det, lc)[0], total_loss(rs, lc)[0]


def full_loss(*args, **kw):
    det, rs = loss_parts(*args, **kw)
    return det + rs


def test_gradient_suite(monkeypatch):
    op_errors = []
    for name, build, shapes, positive in OPS:
        try:
            check_op(build, *shapes, positive=positive, tol=1e-4)
        except AssertionError:
            op_errors.append(name)

    lam = 0.7
    setup = end_to_end_setup()
    _, _, params, disc, _, _ = setup
    iou_t = Replay(losses.iou_targets)
    supp = Replay(adv.suppression_weights)
    monkeypatch.setattr(losses, "iou_targets", iou_t)
    monkeypatch.setattr(adv, "suppression_weights", supp)
    ag.backward(full_loss(*setup, lambda_g=lam))
    iou_t.rewind()
    supp.rewind()

    def part(i):
        def f():
            iou_t.i = supp.i = 0
            with ag.no_grad():
                return loss_parts(*setup, lambda_g=lam)[i].item()
        return f

    # the discriminator descends the whole loss; the backbone descends the
    # detection part and ascends the adversarial part, scaled by lambda_g
    worst = 0.0
    for p in disc.values():
        want = numeric_grad(part(0), p.data, eps=1e-5) + numeric_grad(part(1), p.data, eps=1e-5)
        worst = max(worst, rel_error(p.grad, want))
    for p in params.values():
        want = numeric_grad(part(0), p.data, eps=1e-5) - lam * numeric_grad(part(1), p.data, eps=1e-5)
        worst = max(worst, rel_error(p.grad, want))

    # GRL: backbone gradients with and without reversal are exact negatives
    feats = np.random.default_rng(5).standard_normal((2, 4, 4, 6))
    d6 = adv.init_discriminator(6, seed=1)
    g = {}
    for reverse in (True, False):
        x = Tensor(feats, requires_grad=True)
        ag.backward(ag.reduce_sum(adv.discriminate(x, d6, 1.0, reverse=reverse)))
        g[reverse] = x.grad
    grl_err = float(np.max(np.abs(g[True] + g[False])))

    ok = not op_errors and worst < 1e-3 and grl_err <= 1e-9
    record(3, "gradient suite", ok,
           f"{len(OPS) - len(op_errors)}/{len(OPS)} ops at 1e-4"
           + (f" (failed: {', '.join(op_errors)})" if op_errors else "")
           + f", end-to-end rel err {worst:.1e}, GRL |sum| {grl_err:.1e}")


# ------------------------------------------------------------------ 4


def test_encode_decode():
    rng = np.random.default_rng(4)
    n = 10_000
    gt = np.column_stack([rng.uniform(-40, 40, (n, 3)), rng.uniform(0.2, 6.0, (n, 3)),
                          rng.uniform(-math.pi, math.pi, n)])
    # heading within a quarter turn of the anchor, as target assignment guarantees
    anc = np.column_stack([gt[:, :3] + rng.uniform(-2, 2, (n, 3)), rng.uniform(0.3, 5.0, (n, 3)),
                           gt[:, 6] + rng.uniform(-0.499, 0.499, n) * math.pi])
    t = encode_arrays(gt, anc)
    back = decode_arrays(t, anc)
    err = float(np.max(np.abs(back[:, :6] - gt[:, :6])))
    dyaw = np.abs(back[:, 6] - gt[:, 6])
    filt = t.copy()
    filt[:, 3:6] = 0.0
    dims_exact = np.array_equal(decode_arrays(filt, anc, scale_filtered=True)[:, 3:6], anc[:, 3:6])
    record(4, "encode/decode", err <= 1e-9 and dims_exact and dyaw.max() <= 1e-9,
           f"max position/size error {err:.1e}, heading {dyaw.max():.1e}, filtered dims exact: {dims_exact}")


# ------------------------------------------------------------------ 5


def test_partition_and_frs():
    rng = np.random.default_rng(5)
    bad = 0
    for i in range(100):
        h, w = rng.integers(1, 17, 2)
        if i % 4 == 0:
            s = np.full((h, w), rng.uniform())
        elif i % 4 == 1:
            s = rng.choice([0.0, 0.5, 1.0], (h, w))
        else:
            s = rng.uniform(size=(h, w))
        k = Fraction(int(rng.integers(1, 101)), 100)
        want = min(h * w, math.ceil(k * h * w))
        kept = adv.region_partition(s, float(k)) if s.min() > 0 else None
        count = int(adv.support_mask(s, float(k)).sum())
        if count != want or (kept is not None and np.count_nonzero(kept) != want):
            bad += 1
    logits = np.array([[[-1.0, 2.0, 0.0], [0.3, -4.0, -0.7]],
                       [[-30.0, -31.0, -29.5], [5.0, 5.0, 1.0]]])

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    want = np.array([[sig(2.0), sig(0.3)], [sig(-29.5), sig(5.0)]])
    frs_err = float(np.max(np.abs(adv.frs(logits) - want)))
    record(5, "region partition / FRS", bad == 0 and frs_err <= 1e-12,
           f"{100 - bad}/100 maps keep ceil(k*H*W) cells, FRS error {frs_err:.1e}")


# ------------------------------------------------------------------ 6


def test_memory_bank_script():
    try:
        scripted_rounds()
        ok, detail = True, "three rounds match the hand-derived bank and buffer"
    except AssertionError as e:
        ok, detail = False, str(e).splitlines()[0]
    record(6, "memory bank rules", ok, detail)


# ------------------------------------------------------------------ 7


def test_scale_filter_inertness():
    cfg, anchors, params, disc, targets, xs = end_to_end_setup(seed=7)
    ag.backward(full_loss(cfg, anchors, params, disc, targets, xs))
    a = cfg.anchors_per_cell
    gw = params["reg.w"].grad.reshape(cfg.channels, a, 7)[:, :, 3:6]
    gb = params["reg.b"].grad.reshape(a, 7)[:, 3:6]
    moving = np.any(params["reg.w"].grad.reshape(cfg.channels, a, 7)[:, :, :3] != 0)
    ok = bool(np.all(gw == 0.0) and np.all(gb == 0.0) and moving)
    record(7, "scale-filter inertness", ok,
           f"max |grad| on size channels {max(np.abs(gw).max(), np.abs(gb).max()):.1e}")


# ------------------------------------------------------------------ 8 / 9

STUDY = StudyConfig(cache_dir=_CACHE)


@pytest.mark.slow
def test_trend_reproduction():
    res = run_trend(STUDY)
    med = res.medians()
    gaps = ordering_gaps(med)
    ok = all(g > 1.0 for g in gaps) and res.seconds < 3600
    detail = ", ".join(f"{v} {med[v]:.2f}" for v in VARIANTS)
    detail += f"; gaps {', '.join(f'{g:+.2f}' for g in gaps)}; {res.seconds / 60:.1f} min on {os.cpu_count()} core(s)"
    detail += "; per seed " + " | ".join("/".join(f"{row[v]:.2f}" for v in VARIANTS) for row in res.per_seed.values())
    record(8, "trend (median mAP_3D over 5 seeds)", ok, detail)


@pytest.mark.slow
def test_control_no_harm():
    res = run_control(STUDY)
    deltas = [v["full"] - v["source_only"] for v in res.per_seed.values()]
    med = statistics.median(deltas)
    record(9, "control no-harm", abs(med) <= 2.0,
           f"median change {med:+.2f} (per seed {', '.join(f'{d:+.2f}' for d in deltas)})")


# ------------------------------------------------------------------ 10


def test_adapt_determinism(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"preset": "size_density_shift", "n_source": 24, "n_target": 24}))
    cfg = RunConfig(pretrain_epochs=1, adapt_epochs=1, rounds=2, batch_size=4, lambda_g=0.1)
    cfg.save(tmp_path / "config.json")
    common = ["--config", str(tmp_path / "config.json"), "--data", str(tmp_path / "data")]
    assert main(["gen", "--spec", str(spec), "--out", str(tmp_path / "data"), "--seed", "3"]) == EXIT_OK
    assert main(["pretrain", *common, "--out", str(tmp_path / "pre")]) == EXIT_OK
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["adapt", *common, "--init", str(tmp_path / "pre" / "pretrain.ckpt"),
                     "--out", str(out)]) == EXIT_OK
        assert main(["eval", "--config", str(tmp_path / "config.json"), "--data", str(tmp_path / "data" / "target"),
                     "--ckpt", str(out / "final.ckpt"), "--out", str(out / "eval.json")]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())
                     if p.suffix in (".ckpt", ".json")})
    same = outs[0].keys() == outs[1].keys() and all(outs[0][k] == outs[1][k] for k in outs[0])
    record(10, "adapt determinism", same and "eval.json" in outs[0],
           f"{len(outs[0])} checkpoint/report files compared byte for byte")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
