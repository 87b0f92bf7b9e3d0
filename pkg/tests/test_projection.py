import math

import numpy as np
import pytest

from tlsseg import EmptyImageError, FormatError, ParameterError
from tlsseg.masks import InstanceMask2D
from tlsseg.projection import (ProjectionParams, SphericalImage, SphericalProjector, backproject_mask,
                               estimate_native_resolution, lanczos_resample, load_image, project_station,
                               save_image, spherical_coordinates)
from tlsseg.synth import SceneSpec, default_station_poses, emit_oracle_masks, generate_scene, simulate_scan

from conftest import make_station


def synthetic_station(n=2000, seed=0, resolution=0.01):
    """Points on a jittered angular lattice around the sensor."""
    rng = np.random.default_rng(seed)
    az = rng.uniform(-1.0, 1.0, n)
    el = rng.uniform(-0.5, 0.5, n)
    r = rng.uniform(1.0, 3.0, n)
    xyz = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
    return make_station(xyz, intensity=rng.random(n))


def lanczos_reference(x, a):
    if x == 0:
        return 1.0
    if abs(x) >= a:
        return 0.0
    return a * math.sin(math.pi * x) * math.sin(math.pi * x / a) / (math.pi**2 * x**2)


def test_params_resolution():
    assert ProjectionParams(0.003, 6.0).angular_resolution == 0.003 / 6.0
    with pytest.raises(ParameterError):
        ProjectionParams(d_p=0.0)


def test_point_on_x_axis():
    img = project_station(make_station([[2.0, 0.0, 0.0]]), ProjectionParams(), resolution=0.001)
    assert img.shape == (1, 1) and img.col0 == 0 and img.row_top == 0
    assert img.range[0, 0] == 2.0
    np.testing.assert_array_equal(img.pixel_points(0, 0), [0])


def test_rotated_sensor_frame():
    # sensor +X points along LCS +Y
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    station = make_station([[0.0, 3.0, 0.0]], rotation=R)
    img = project_station(station, ProjectionParams(), resolution=0.001)
    assert img.col0 == 0 and img.row_top == 0 and img.range[0, 0] == pytest.approx(3.0)


def test_nearest_point_wins():
    station = make_station([[4.0, 0.0, 0.0], [2.0, 0.0, 0.0]], intensity=[0.9, 0.1])
    img = project_station(station, ProjectionParams(), resolution=0.001)
    assert img.range[0, 0] == 2.0 and img.intensity[0, 0] == 0.1
    assert sorted(img.pixel_points(0, 0)) == [0, 1]


def test_r_max_filter():
    station = make_station([[7.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
    img = project_station(station, ProjectionParams(r_max=6.0), resolution=0.01)
    assert 0 not in img.pixmap_indices
    assert sorted(img.pixmap_indices) == [1, 2]
    with pytest.raises(EmptyImageError):
        project_station(make_station([[7.0, 0, 0]]), ProjectionParams(r_max=6.0), resolution=0.01)


def test_image_axes_orientation():
    # larger azimuth -> larger column; larger elevation -> smaller row
    pts = [[2.0, 0.0, 0.0], [2.0, 0.2, 0.0], [2.0, 0.0, 0.2]]
    img = project_station(make_station(pts), ProjectionParams(), resolution=0.01)
    where = {int(i): divmod(p, img.width) for p in range(img.height * img.width) for i in img.points_of_pixels([p])}
    assert where[1][1] > where[0][1] and where[1][0] == where[0][0]
    assert where[2][0] < where[0][0] and where[2][1] == where[0][1]


def test_round_trip_and_nearest_wins_brute_force():
    station = synthetic_station(5000)
    params = ProjectionParams(r_max=2.5)
    img = project_station(station, params, resolution=0.02)
    r, az, el = spherical_coordinates(station.xyz)
    retained = np.flatnonzero(r <= 2.5)
    counts = np.bincount(img.pixmap_indices, minlength=len(station))
    assert np.all(counts[retained] == 1) and np.all(np.delete(counts, retained) == 0)
    full = np.ones(img.shape, bool)
    np.testing.assert_array_equal(np.sort(backproject_mask(img, full, station).point_index), retained)
    for p in np.flatnonzero(img.pixel_counts().reshape(-1)):
        members = img.points_of_pixels([p])
        assert img.range.reshape(-1)[p] == r[members].min()
    assert img.width == math.floor(az[retained].max() / 0.02) - math.floor(az[retained].min() / 0.02) + 1


def test_native_resolution_estimate():
    theta = 0.002
    az = np.arange(-200, 200) * theta + theta / 2
    el = np.zeros_like(az)
    xyz = np.column_stack([np.cos(az), np.sin(az), el])
    assert estimate_native_resolution(make_station(xyz)) == pytest.approx(theta, rel=1e-9)
    with pytest.raises(EmptyImageError):
        estimate_native_resolution(make_station([[1.0, 0, 0]]))


# ---------------------------------------------------------------- Lanczos

def _dense_image(values_range, values_int, resolution=0.001):
    H, W = values_range.shape
    offsets = np.arange(H * W + 1)
    return SphericalImage("s", resolution, 0, H - 1, values_range, values_int, offsets, np.arange(H * W))


def test_lanczos_constant_image():
    img = _dense_image(np.full((30, 40), 1.7), np.full((30, 40), 0.3))
    out = lanczos_resample(img, ProjectionParams(d_p=0.0025, r_max=1.0, lanczos_a=3))
    np.testing.assert_allclose(out.range, 1.7, rtol=1e-9)
    np.testing.assert_allclose(out.intensity, 0.3, rtol=1e-9)


def test_lanczos_constant_with_holes(rng):
    rng_img = np.where(rng.random((30, 40)) < 0.4, 0.0, 2.5)
    img = _dense_image(rng_img, np.where(rng_img > 0, 0.6, 0.0))
    out = lanczos_resample(img, ProjectionParams(d_p=0.003, r_max=1.0))
    valid = out.range > 0
    assert valid.any()
    np.testing.assert_allclose(out.range[valid], 2.5, rtol=1e-9)


def test_lanczos_identity_at_scale_one():
    station = synthetic_station(3000)
    params = ProjectionParams(d_p=0.06, r_max=3.0)
    full = project_station(station, params, resolution=0.02)
    out = lanczos_resample(full, params)
    np.testing.assert_array_equal(out.range, full.range)
    np.testing.assert_array_equal(out.intensity, full.intensity)
    np.testing.assert_array_equal(out.pixmap_indices, full.pixmap_indices)


def test_lanczos_upscale_rejected():
    img = _dense_image(np.ones((4, 4)), np.ones((4, 4)), resolution=0.01)
    with pytest.raises(ParameterError):
        lanczos_resample(img, ProjectionParams(d_p=0.005, r_max=1.0))


def test_lanczos_impulse_matches_formula():
    H, W, a, s = 24, 26, 3, 2.0
    base = np.ones((H, W))
    base[11, 12] += 1.0
    img = _dense_image(base, np.full((H, W), 0.5))
    out = lanczos_resample(img, ProjectionParams(d_p=0.002, r_max=1.0, lanczos_a=a))
    assert out.shape == (H // 2, W // 2)

    def axis(n_in, o):
        c = (o + 0.5) * s - 0.5
        weights = [lanczos_reference((i - c) / s, a) for i in range(n_in)]
        return weights, sum(weights)

    for oy in range(out.height):
        wy, sy = axis(H, oy)
        for ox in range(out.width):
            wx, sx = axis(W, ox)
            expected = 1.0 + wy[11] * wx[12] / (sy * sx)
            assert out.range[oy, ox] == pytest.approx(expected, rel=1e-12)


def test_lanczos_pixmap_union_rule(rng):
    H, W, a, s = 10, 12, 2, 2.0
    occupied = rng.random((H, W)) < 0.7
    counts = np.where(occupied, rng.integers(1, 3, (H, W)), 0).reshape(-1)
    offsets = np.r_[0, np.cumsum(counts)]
    indices = np.arange(offsets[-1])
    img = SphericalImage("s", 0.001, 0, H - 1, np.where(occupied, 1.0, 0.0), np.zeros((H, W)), offsets, indices)
    out = lanczos_resample(img, ProjectionParams(d_p=0.002, r_max=1.0, lanczos_a=a))
    for oy in range(out.height):
        cy = (oy + 0.5) * s - 0.5
        for ox in range(out.width):
            cx = (ox + 0.5) * s - 0.5
            expected = set()
            for iy in range(H):
                for ix in range(W):
                    w = lanczos_reference((iy - cy) / s, a) * lanczos_reference((ix - cx) / s, a)
                    if w > 0:
                        expected.update(img.pixel_points(iy, ix).tolist())
            assert set(out.pixel_points(oy, ox).tolist()) == expected


def test_projector_estimator():
    station = synthetic_station(3000)
    proj = SphericalProjector(d_p=0.12, r_max=3.0, native_resolution=0.02).fit([station])
    assert proj.native_resolution_ == 0.02
    img = proj.transform(station)
    assert img.resolution == 0.04
    assert proj.get_params()["d_p"] == 0.12


# ---------------------------------------------------------------- back-projection

def test_backproject_single_pixel_three_points():
    pts = [[2.0, 0.0, 0.0], [2.5, 0.0, 0.0], [3.0, 0.0, 0.0], [2.0, 0.5, 0.0]]
    station = make_station(pts)
    img = project_station(station, ProjectionParams(), resolution=0.01)
    mask = np.zeros(img.shape, bool)
    row, col = divmod(int(np.flatnonzero(img.pixel_counts().reshape(-1) == 3)[0]), img.width)
    mask[row, col] = True
    part = backproject_mask(img, InstanceMask2D("s00", "range", 0, "wheat", 0.7, mask), station)
    assert len(part) == 3 and part.class_label == "wheat" and part.confidence == 0.7
    assert part.station_id == "s00" and part.modality == "range"


def test_backproject_empty_and_mismatch():
    station = synthetic_station(500)
    img = project_station(station, ProjectionParams(), resolution=0.05)
    assert backproject_mask(img, np.zeros(img.shape, bool), station) is None
    with pytest.raises(FormatError):
        backproject_mask(img, np.ones((img.height + 1, img.width), bool), station)


def test_oracle_mask_recovers_visible_head():
    scene = generate_scene(SceneSpec(n_heads=6, plot_extent=(0.25, 0.25), seed=4))
    params = ProjectionParams(d_p=0.003, r_max=1.5)
    origin, R = default_station_poses(scene.spec, 6)[0]
    station, truth = simulate_scan(scene, origin, R, params.angular_resolution)
    img = lanczos_resample(project_station(station, params, params.angular_resolution), params)
    masks = emit_oracle_masks(station, truth, img)
    assert len(masks) > 0
    for m in masks:
        part = backproject_mask(img, m, station)
        head = truth.instance[part.point_index[0]]
        visible = np.flatnonzero(truth.instance == head)
        np.testing.assert_array_equal(part.point_index, visible)


def test_image_files_round_trip(tmp_path):
    station = synthetic_station(3000)
    params = ProjectionParams(d_p=0.12, r_max=3.0)
    img = lanczos_resample(project_station(station, params, 0.02), params)
    save_image(img, tmp_path, provenance={"config_sha256": "x"})
    for suffix in ("_intensity.png", "_range.png", "_geom.json", "_pixmap.bin"):
        assert (tmp_path / f"s00{suffix}").exists()
    back = load_image(tmp_path, "s00")
    assert back.shape == img.shape and back.resolution == img.resolution
    np.testing.assert_array_equal(back.pixmap_offsets, img.pixmap_offsets)
    np.testing.assert_array_equal(back.pixmap_indices, img.pixmap_indices)
    np.testing.assert_allclose(back.range, img.range, atol=0.5e-3 + 1e-12)
    np.testing.assert_allclose(back.intensity, img.intensity, atol=0.5 / 65535 + 1e-12)
