import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from tlsseg.obb import BOX_EPS, OBB, compute_obb, intersection_volume, obb_iou, obb_iou_monte_carlo

from oracles import monte_carlo_iou


def cube(center=(0, 0, 0), half=0.5, axes=None):
    return OBB(np.asarray(center, float), np.eye(3) if axes is None else axes, np.full(3, half))


def test_axis_aligned_box_corners():
    corners = np.array([[x, y, z] for x in (0, 0.1) for y in (0, 0.2) for z in (0, 0.3)])
    box = compute_obb(corners)
    np.testing.assert_allclose(sorted(box.half_extents), [0.05, 0.10, 0.15], atol=1e-12)
    np.testing.assert_allclose(box.center, [0.05, 0.1, 0.15], atol=1e-12)
    assert box.contains(corners, tol=1e-12).all()


def test_single_point_box():
    box = compute_obb([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(box.half_extents, [BOX_EPS] * 3)
    np.testing.assert_array_equal(box.center, [1.0, 2.0, 3.0])


def test_collinear_points():
    pts = np.column_stack([np.zeros(11), np.zeros(11), np.linspace(0, 0.1, 11)])
    box = compute_obb(pts)
    np.testing.assert_allclose(sorted(box.half_extents), [BOX_EPS, BOX_EPS, 0.05], atol=1e-12)


def test_axes_are_rotation(rng):
    for _ in range(20):
        box = compute_obb(rng.normal(size=(30, 3)) * [3, 2, 1])
        np.testing.assert_allclose(box.axes.T @ box.axes, np.eye(3), atol=1e-12)
        assert np.linalg.det(box.axes) == pytest.approx(1.0)


def test_box_contains_points(rng):
    pts = rng.normal(size=(200, 3)) @ Rotation.random(random_state=1).as_matrix().T
    assert compute_obb(pts).contains(pts, tol=1e-9).all()


def test_iou_identical():
    assert obb_iou(cube(), cube()) == pytest.approx(1.0, abs=1e-12)


def test_iou_offset_cubes():
    assert obb_iou(cube(), cube((0.5, 0, 0))) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_disjoint():
    assert obb_iou(cube(), cube((2.0, 0, 0))) == 0.0
    assert obb_iou(cube(), cube((1.0, 0, 0))) == pytest.approx(0.0, abs=1e-12)  # touching face


def test_iou_rotated_45():
    R = Rotation.from_euler("z", 45, degrees=True).as_matrix()
    a, b = cube(), cube(axes=R)
    exact = obb_iou(a, b)
    # analytic: the octagon of two unit squares rotated by 45 degrees has area 2(sqrt2 - 1)
    inter = 2 * (math.sqrt(2) - 1)
    assert exact == pytest.approx(inter / (2 - inter), abs=1e-12)
    assert exact == pytest.approx(monte_carlo_iou(a, b, 1_000_000, seed=3), abs=0.01)


def test_iou_contained():
    assert obb_iou(cube(half=1.0), cube(half=0.5)) == pytest.approx(1 / 8, abs=1e-12)


def test_iou_symmetry_and_range(rng):
    for seed in range(30):
        r = np.random.default_rng(seed)
        a = OBB(r.normal(0, 0.3, 3), Rotation.random(random_state=seed).as_matrix(), r.uniform(0.1, 1, 3))
        b = OBB(r.normal(0, 0.3, 3), Rotation.random(random_state=seed + 100).as_matrix(), r.uniform(0.1, 1, 3))
        ab, ba = obb_iou(a, b), obb_iou(b, a)
        assert ab == pytest.approx(ba, abs=1e-9)
        assert 0.0 <= ab <= 1.0
        assert intersection_volume(a, b) <= min(a.volume, b.volume) + 1e-12


def test_library_monte_carlo_estimator():
    R = Rotation.from_euler("xyz", [10, 20, 30], degrees=True).as_matrix()
    a, b = cube(), OBB(np.array([0.2, 0.1, 0.0]), R, np.array([0.4, 0.5, 0.6]))
    assert obb_iou_monte_carlo(a, b, 200_000, seed=1) == pytest.approx(obb_iou(a, b), abs=0.01)


def test_rigid_motion_invariance():
    a = OBB(np.array([0.1, 0, 0]), np.eye(3), np.array([0.3, 0.2, 0.1]))
    b = OBB(np.array([0.2, 0.1, 0]), Rotation.from_euler("z", 30, degrees=True).as_matrix(), np.array([0.25, 0.2, 0.15]))
    R, t = Rotation.random(random_state=7).as_matrix(), np.array([3.0, -1.0, 2.0])
    assert obb_iou(a.transformed(R, t), b.transformed(R, t)) == pytest.approx(obb_iou(a, b), abs=1e-9)


def test_dict_round_trip():
    box = compute_obb(np.random.default_rng(0).normal(size=(10, 3)))
    back = OBB.from_dict(box.to_dict())
    np.testing.assert_array_equal(back.axes, box.axes)
