import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import axis_aligned_iou_bev, monte_carlo_iou
from uda3d.geometry import (
    Box3D, RegressionTarget, bev_corners, boxes_from_csv, boxes_from_json, boxes_to_csv,
    boxes_to_json, decode, decode_arrays, encode, encode_arrays, filter_scale, iou_3d,
    iou_3d_arrays, iou_bev, iou_bev_arrays, iou_matrix, normalize_yaw, polygon_area,
)

coord = st.floats(-5, 5)
dim = st.floats(0.2, 5)
yaw = st.floats(-math.pi, math.pi)


@st.composite
def boxes(draw):
    return Box3D(draw(coord), draw(coord), draw(st.floats(-1, 1)), draw(dim), draw(dim),
                 draw(dim), draw(yaw))


def same_corners(got, want, tol=1e-12):
    remaining = list(want)
    for p in got:
        d = [math.dist(p, q) for q in remaining]
        k = int(np.argmin(d))
        if d[k] > tol:
            return False
        remaining.pop(k)
    return True


# ------------------------------------------------------------------ Box3D

def test_box_validation():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1, 1, 1, 0, score=1.5)
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi).yaw == pytest.approx(math.pi)
    assert Box3D(0, 0, 0, 1, 1, 1, -math.pi).yaw == pytest.approx(math.pi)


@given(st.floats(-50, 50))
def test_normalize_yaw_range(a):
    y = normalize_yaw(a)
    assert -math.pi < y <= math.pi
    assert math.isclose(math.cos(y), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(y), math.sin(a), abs_tol=1e-9)


def test_box_serialization_roundtrip():
    bs = [Box3D(1.5, -2, 0.75, 4, 1.8, 1.5, 0.3, 0, 0.9), Box3D(0, 0, 1, 1, 1, 2, -1, 2)]
    assert boxes_from_json(boxes_to_json(bs)) == bs
    text = boxes_to_csv(bs)
    assert text.splitlines()[0] == "cx,cy,cz,l,w,h,yaw,class_id,score"
    assert boxes_from_csv(text) == bs


# ------------------------------------------------------------------ corners

def test_corners_axis_aligned():
    got = bev_corners(Box3D(0, 0, 0, 4, 2, 1, 0))
    assert same_corners(got, [(2, 1), (-2, 1), (-2, -1), (2, -1)])


def test_corners_quarter_turn():
    got = bev_corners(Box3D(0, 0, 0, 4, 2, 1, math.pi / 2))
    assert same_corners(got, [(1, 2), (-1, 2), (-1, -2), (1, -2)])


def test_corners_rotated_square():
    got = bev_corners(Box3D(1, 1, 0, 2, 2, 1, math.pi / 4))
    assert any(math.dist(p, (1, 1 + math.sqrt(2))) < 1e-12 for p in got)


@given(boxes())
def test_corners_counter_clockwise(b):
    # positive shoelace area means counter-clockwise order
    pts = bev_corners(b)
    signed = 0.5 * sum(pts[i][0] * pts[i - 3][1] - pts[i - 3][0] * pts[i][1] for i in range(4))
    assert signed == pytest.approx(b.l * b.w, rel=1e-9)
    assert polygon_area(pts) == pytest.approx(b.l * b.w, rel=1e-9)


# ------------------------------------------------------------------ IoU examples

def test_iou_identical_and_disjoint():
    b = Box3D(1, 2, 0.5, 4, 2, 1.5, 0.7)
    assert iou_bev(b, b) == pytest.approx(1.0, abs=1e-12)
    assert iou_3d(b, b) == pytest.approx(1.0, abs=1e-12)
    far = Box3D(20, 2, 0.5, 4, 2, 1.5, 0.7)
    assert iou_bev(b, far) == 0.0


def test_iou_bev_offset_squares():
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    b = Box3D(1, 0, 0, 2, 2, 1, 0)
    assert iou_bev(a, b) == pytest.approx(2 / 6, abs=1e-12)
    assert monte_carlo_iou(a, b, dims=2) == pytest.approx(2 / 6, abs=1e-2)


def test_iou_3d_offset_cubes():
    a = Box3D(0, 0, 0, 1, 1, 1, 0)
    b = Box3D(0.5, 0, 0, 1, 1, 1, 0)
    assert iou_3d(a, b) == pytest.approx(0.5 / 1.5, abs=1e-12)
    assert monte_carlo_iou(a, b) == pytest.approx(0.5 / 1.5, abs=1e-2)


def test_iou_3d_disjoint_heights():
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    assert iou_3d(a, Box3D(0, 0, 5, 2, 2, 1, 0)) == 0.0


def test_iou_matrix_shapes():
    b = Box3D(0, 0, 0, 1, 1, 1, 0)
    assert iou_matrix([], [b, b]).shape == (0, 2)
    assert iou_matrix([b], []).shape == (1, 0)
    assert iou_matrix([b], [b]) == pytest.approx(np.array([[1.0]]))
    far = Box3D(50, 0, 0, 1, 1, 1, 0)
    assert np.allclose(iou_matrix([b, far], [b, far]), np.eye(2))


def test_tiny_intersection_is_zero():
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    b = Box3D(2 - 1e-14, 0, 0, 2, 2, 1, 0)
    assert iou_bev(a, b) == 0.0


def test_rotated_against_monte_carlo():
    rng = np.random.default_rng(3)
    for k in range(5):
        a = Box3D(0, 0, 0, *rng.uniform(1, 4, 3), rng.uniform(-3, 3))
        b = Box3D(*rng.uniform(-1, 1, 3), *rng.uniform(1, 4, 3), rng.uniform(-3, 3))
        assert iou_3d(a, b) == pytest.approx(monte_carlo_iou(a, b, 400_000, k), abs=1e-2)
        assert iou_bev(a, b) == pytest.approx(monte_carlo_iou(a, b, 400_000, k, dims=2), abs=1e-2)


# ------------------------------------------------------------------ IoU properties

@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou_3d(a, b) == iou_3d(b, a)
    assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)
    for v in (iou_3d(a, b), iou_bev(a, b)):
        assert 0.0 <= v <= 1.0


@given(boxes())
def test_iou_self_is_one(a):
    assert iou_3d(a, a) == pytest.approx(1.0, abs=1e-9)
    assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-9)


@given(boxes(), boxes(), yaw)
def test_iou_bev_rotation_invariant(a, b, phi):
    c, s = math.cos(phi), math.sin(phi)

    def rot(x):
        return Box3D(c * x.cx - s * x.cy, s * x.cx + c * x.cy, x.cz, x.l, x.w, x.h, x.yaw + phi)

    assert iou_bev(rot(a), rot(b)) == pytest.approx(iou_bev(a, b), abs=1e-6)


@given(boxes(), boxes())
def test_axis_aligned_matches_closed_form(a, b):
    a0 = Box3D(a.cx, a.cy, a.cz, a.l, a.w, a.h, 0.0)
    b0 = Box3D(b.cx, b.cy, b.cz, b.l, b.w, b.h, 0.0)
    assert iou_bev(a0, b0) == pytest.approx(axis_aligned_iou_bev(a0, b0), abs=1e-9)


@given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
def test_vectorized_matches_scalar(xs, ys):
    A = np.array([b.to_array() for b in xs])
    B = np.array([b.to_array() for b in ys])
    want3 = np.array([[iou_3d(x, y) for y in ys] for x in xs])
    wantb = np.array([[iou_bev(x, y) for y in ys] for x in xs])
    assert np.allclose(iou_3d_arrays(A, B), want3, atol=1e-12)
    assert np.allclose(iou_bev_arrays(A, B), wantb, atol=1e-12)


# ------------------------------------------------------------------ encoding

ANCHOR = Box3D(1.0, -2.0, 0.8, 4.2, 1.8, 1.6, 0.0)


def test_encode_identity():
    assert np.all(encode(ANCHOR, ANCHOR).to_array() == 0.0)


def test_encode_log_height():
    g = Box3D(ANCHOR.cx, ANCHOR.cy, ANCHOR.cz, ANCHOR.l, ANCHOR.w, math.e * ANCHOR.h, ANCHOR.yaw)
    t = encode(g, ANCHOR).to_array()
    assert t[5] == pytest.approx(1.0)
    assert np.allclose(np.delete(t, 5), 0.0)


def test_encode_unit_offset():
    d_a = math.hypot(ANCHOR.l, ANCHOR.w)
    g = Box3D(ANCHOR.cx + d_a, ANCHOR.cy, ANCHOR.cz, ANCHOR.l, ANCHOR.w, ANCHOR.h, 0.0)
    assert encode(g, ANCHOR).x_t == pytest.approx(1.0)


def test_encode_rejects_bad_anchor():
    with pytest.raises(ValueError):
        encode_arrays(np.ones(7), np.array([0, 0, 0, 0, 1, 1, 0.0]))


def test_decode_zero_target_is_anchor():
    got = decode(RegressionTarget(), ANCHOR)
    assert np.allclose(got.to_array(), ANCHOR.to_array())


def test_decode_filtered_keeps_anchor_dims():
    t = filter_scale(RegressionTarget(x_t=1.0, l_t=0.3))
    got = decode(t, ANCHOR)
    assert (got.l, got.w, got.h) == (ANCHOR.l, ANCHOR.w, ANCHOR.h)
    assert got.cx == pytest.approx(ANCHOR.cx + math.hypot(ANCHOR.l, ANCHOR.w))


def test_filter_scale_examples():
    t = filter_scale(RegressionTarget(1, 2, 3, 4, 5, 6, 0.5))
    assert t.to_array().tolist() == [1, 2, 3, 0, 0, 0, 0.5]
    assert t.scale_filtered
    assert filter_scale(t) == t
    z = filter_scale(RegressionTarget())
    assert np.all(z.to_array() == 0) and z.scale_filtered


def test_regression_target_invariants():
    with pytest.raises(ValueError):
        RegressionTarget(theta_t=1.5)
    with pytest.raises(ValueError):
        RegressionTarget(l_t=1.0, scale_filtered=True)


@given(boxes(), boxes())
def test_roundtrip_position_and_dims(g, a):
    arr_a = a.to_array()
    arr_a[6] = g.yaw + 0.4  # keep |dyaw| < pi/2
    back = decode_arrays(encode_arrays(g.to_array(), arr_a), arr_a)
    assert np.allclose(back[:6], g.to_array()[:6], rtol=0, atol=1e-9)
    assert back[6] == pytest.approx(g.yaw, abs=1e-9)


@given(boxes(), boxes())
def test_filter_commutes_with_position_decode(g, a):
    t = encode(g, a)
    full, filt = decode(t, a), decode(filter_scale(t), a)
    assert (full.cx, full.cy, full.cz) == (filt.cx, filt.cy, filt.cz)
