import math

import numpy as np
import pytest

from timealign import Box3D, DataError, wrap_angle


def test_wrap_angle_range():
    rng = np.random.default_rng(0)
    for a in rng.uniform(-50.0, 50.0, size=200):
        w = wrap_angle(float(a))
        assert -math.pi < w <= math.pi
        # same direction
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)


def test_wrap_angle_edges():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(2.0 * math.pi) == pytest.approx(0.0, abs=1e-12)
    assert wrap_angle(3.0 * math.pi) == pytest.approx(math.pi)


def test_corners_axis_aligned():
    box = Box3D(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.0, "car")
    got = box.bev_corners()
    want = np.array([[3.0, 3.0], [-1.0, 3.0], [-1.0, 1.0], [3.0, 1.0]])
    assert np.allclose(got, want)


def test_corners_rotated_oracle():
    # rotate each local corner by hand and compare
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.uniform(-10, 10, size=2)
        l, w = rng.uniform(0.5, 6.0, size=2)
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = Box3D(float(x), float(y), 0.0, float(l), float(w), 1.0, yaw, "car")
        local = [(l / 2, w / 2), (-l / 2, w / 2), (-l / 2, -w / 2), (l / 2, -w / 2)]
        want = []
        for lx, ly in local:
            wx = lx * math.cos(yaw) - ly * math.sin(yaw) + x
            wy = lx * math.sin(yaw) + ly * math.cos(yaw) + y
            want.append((wx, wy))
        assert np.allclose(box.bev_corners(), np.array(want), atol=1e-12)


def test_corner_side_lengths():
    box = Box3D(0.0, 0.0, 0.0, 4.2, 1.8, 1.5, 0.7, "car")
    c = box.bev_corners()
    assert np.hypot(*(c[0] - c[1])) == pytest.approx(4.2)
    assert np.hypot(*(c[1] - c[2])) == pytest.approx(1.8)
    assert np.hypot(*(c[2] - c[3])) == pytest.approx(4.2)
    assert np.hypot(*(c[3] - c[0])) == pytest.approx(1.8)


def test_center_distance():
    a = Box3D(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, "car")
    b = Box3D(3.0, 4.0, 2.0, 1.0, 1.0, 1.0, 1.0, "truck")
    assert a.center_distance(b) == pytest.approx(5.0)
    assert b.center_distance(a) == pytest.approx(5.0)
    assert a.center_distance(a) == 0.0


def test_record_roundtrip():
    box = Box3D(1.5, -2.25, 0.75, 4.0, 1.9, 1.6, -0.3, "pedestrian", score=0.625)
    rec = box.as_record()
    assert len(rec) == 9
    back = Box3D.from_record(rec)
    assert back == box


def test_record_wrong_length():
    with pytest.raises(DataError):
        Box3D.from_record([1, 2, 3])


def test_invalid_boxes():
    with pytest.raises(DataError):
        Box3D(0.0, 0.0, 0.0, -1.0, 1.0, 1.0, 0.0, "car")
    with pytest.raises(DataError):
        Box3D(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, "car")
    with pytest.raises(DataError):
        Box3D(float("nan"), 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, "car")
    with pytest.raises(DataError):
        Box3D(0.0, 0.0, 0.0, 1.0, 1.0, float("inf"), 0.0, "car")


def test_moved():
    box = Box3D(1.0, 1.0, 0.0, 2.0, 1.0, 1.0, 0.2, "car", score=0.5)
    shifted = box.moved(0.5, -1.5)
    assert shifted.x == 1.5 and shifted.y == -0.5
    assert shifted.yaw == box.yaw and shifted.score == box.score
    # original untouched
    assert box.x == 1.0
