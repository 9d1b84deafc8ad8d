import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uda3d.evaluation import (
    EvalReport, average_precision_r40, closed_gap, evaluate_predictions, format_gap, match_scene,
    precision_recall, reports_to_csv, reports_to_markdown,
)
from uda3d.geometry import Box3D


def boxes(n, cls=0, score=None, dx=0.0):
    return [Box3D(8.0 * i + dx, 0, 0.8, 4, 1.8, 1.6, 0.2, cls, score) for i in range(n)]


def test_perfect_detections_score_100():
    gts = [boxes(3, 0) + boxes(2, 1, dx=30), boxes(1, 2)]
    preds = [[replace_score(b, 1.0) for b in s] for s in gts]
    rep = evaluate_predictions(preds, gts)
    assert all(v == pytest.approx(100.0) for v in rep.ap_3d.values())
    assert all(v == pytest.approx(100.0) for v in rep.ap_bev.values())


def replace_score(b, s):
    return Box3D(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.class_id, s)


def test_no_detections_score_zero():
    rep = evaluate_predictions([[]], [boxes(2)])
    assert rep.ap_3d["car"] == 0.0
    assert math.isnan(rep.ap_3d["pedestrian"])
    assert rep.mean_3d == 0.0  # NaN classes are excluded


def test_hand_traced_r40():
    # 2 GT; ranks: FP (0.95) then TP (0.9) -> precision 1/2 up to recall 1/2
    gts = boxes(2)
    preds = [replace_score(gts[0], 0.9), Box3D(50, 50, 0.8, 4, 1.8, 1.6, 0, 0, 0.95)]
    rep = evaluate_predictions([preds], [gts])
    assert rep.ap_3d["car"] == pytest.approx(25.0)
    assert average_precision_r40([0.95, 0.9], [False, True], 2) == pytest.approx(25.0)


def test_match_consumes_each_gt_once():
    g = boxes(1)
    scores, tps = match_scene([replace_score(g[0], 0.9), replace_score(g[0], 0.8)], g, 0.7)
    assert tps == [True, False]


def test_threshold_applies_per_kind():
    g = boxes(1)[0]
    taller = Box3D(g.cx, g.cy, g.cz + 0.6, g.l, g.w, g.h, g.yaw, 0, 0.9)
    rep = evaluate_predictions([[taller]], [[g]])
    assert rep.ap_bev["car"] == pytest.approx(100.0) and rep.ap_3d["car"] == 0.0


flags = st.lists(st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=1, max_size=12)


@given(flags, st.floats(0.0, 1.0), st.integers(0, 4))
def test_adding_true_positive_never_lowers_ap(dets, s, extra_gt):
    scores = [d[0] for d in dets]
    tps = [d[1] for d in dets]
    n_gt = sum(tps) + 1 + extra_gt
    before = average_precision_r40(scores, tps, n_gt)
    after = average_precision_r40(scores + [s], tps + [True], n_gt)
    assert after >= before - 1e-12


@given(flags, st.integers(0, 3))
def test_low_false_positive_changes_nothing(dets, extra_gt):
    scores = [d[0] for d in dets]
    tps = [d[1] for d in dets]
    n_gt = max(1, sum(tps) + extra_gt)
    low = min([sc for sc, t in dets if t], default=0.5) / 2
    assert average_precision_r40(scores + [low], tps + [False], n_gt) == \
        pytest.approx(average_precision_r40(scores, tps, n_gt), abs=1e-12)


@given(flags, st.integers(0, 3))
def test_ap_bounds(dets, extra_gt):
    tps = [d[1] for d in dets]
    ap = average_precision_r40([d[0] for d in dets], tps, max(1, sum(tps) + extra_gt))
    assert 0.0 <= ap <= 100.0


def test_precision_recall_ordering():
    p, r = precision_recall([0.2, 0.9, 0.5], [True, True, False], 4)
    assert p.tolist() == pytest.approx([1.0, 0.5, 2 / 3])
    assert r.tolist() == pytest.approx([0.25, 0.25, 0.5])


# ------------------------------------------------------------------ closed gap

def test_closed_gap_examples():
    assert closed_gap(65.85, 40.66, 59.79) == pytest.approx(131.68, abs=5e-3)
    assert closed_gap(47.99, 40.66, 59.79) == pytest.approx(38.32, abs=5e-3)
    assert closed_gap(40.66, 40.66, 59.79) == 0.0
    assert math.isnan(closed_gap(50.0, 40.0, 40.0))
    assert format_gap(closed_gap(1, 1, 1)) == "undefined"
    assert format_gap(closed_gap(65.85, 40.66, 59.79)) == "+131.68%"


def test_closed_gap_signed():
    assert closed_gap(30.0, 40.0, 50.0) == pytest.approx(-100.0)


# ------------------------------------------------------------------ reports

def test_report_roundtrip_and_render():
    rep = EvalReport({"car": 50.0, "pedestrian": 20.0}, {"car": 40.0, "pedestrian": 10.0})
    assert EvalReport.from_dict(rep.to_dict()) == rep
    assert rep.mean_3d == 25.0
    so = EvalReport({"car": 40.0, "pedestrian": 10.0}, {"car": 30.0, "pedestrian": 0.0})
    orc = EvalReport({"car": 60.0, "pedestrian": 30.0}, {"car": 50.0, "pedestrian": 20.0})
    g = rep.with_gaps(so, orc)
    assert g.closed_gap_3d == {"car": 50.0, "pedestrian": 50.0}
    md = reports_to_markdown({"model": rep})
    assert "| model | 50.00 / 40.00 | 20.00 / 10.00 | 35.00 / 25.00 |" in md
    assert reports_to_csv({"m": rep}).splitlines()[1] == "m,car,50.0000,40.0000"
