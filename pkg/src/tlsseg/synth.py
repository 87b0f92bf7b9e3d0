"""Synthetic crop plots with known instances, simulated scans and oracle masks.

Heads are ellipsoids on cylindrical stems above a ground plane, optionally
with flat leaf discs as extra occluders. A scan keeps, per angular cell,
only the nearest scene point (point-based z-buffer).
"""

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ellipeinc, ellipkinc

from ._validation import PoseError, check_count, check_positive, check_rotation
from .masks import InstanceMask2D, MaskSet
from .projection import MODALITIES, angular_cells, spherical_coordinates
from .scan_io import ScanStation, to_sensor_frame

HEAD, STEM, LEAF, GROUND = 3, 2, 1, 0
_INTENSITY = {HEAD: 0.8, STEM: 0.55, LEAF: 0.45, GROUND: 0.25}


@dataclass
class SceneSpec:
    n_heads: int = 50
    head_half_axes: tuple = (0.008, 0.014)  # horizontal semi-axes (m)
    head_length: tuple = (0.02, 0.035)  # vertical semi-axis (m)
    stem_height: tuple = (0.15, 0.30)
    stem_radius: float = 0.002
    plot_extent: tuple = (0.6, 0.6)
    density: float = 2.0e6  # surface points per m^2
    ground_density: float = 5.0e5
    occluder_density: float = 0.0  # leaf discs per m^2 of plot
    max_tilt: float = 0.25  # rad
    min_gap: float = 0.012  # clearance between head bounding spheres (m)
    seed: int = 0

    def __post_init__(self):
        check_count(self.n_heads, "n_heads", minimum=0)
        for name in ("head_half_axes", "head_length", "stem_height", "plot_extent"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive (low, high) range")
        check_positive(self.density, "density")
        check_positive(self.ground_density, "ground_density")


@dataclass(eq=False)
class OracleScene:
    xyz: np.ndarray
    intensity: np.ndarray
    instance: np.ndarray  # head id per point, -1 for background
    part: np.ndarray  # GROUND / LEAF / STEM / HEAD
    head_centers: np.ndarray
    head_axes: np.ndarray  # (n, 3) semi-axes
    head_rotations: np.ndarray  # (n, 3, 3) body -> LCS
    stems: list = field(default_factory=list)  # (base xyz, top z, radius)
    spec: SceneSpec = None

    @property
    def n_heads(self):
        return len(self.head_centers)

    @property
    def references(self):
        return self.head_centers.copy()

    def head_points(self, head_id):
        return self.xyz[self.instance == head_id]


def ellipsoid_area(a, b, c):
    """Exact surface area via incomplete elliptic integrals."""
    a, b, c = sorted((a, b, c), reverse=True)
    if math.isclose(a, c):
        return 4.0 * math.pi * a * a
    phi = math.acos(c / a)
    m = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c)) if b > c else 0.0
    s = math.sin(phi)
    return 2 * math.pi * c * c + 2 * math.pi * a * b / s * (ellipeinc(phi, m) * s * s + ellipkinc(phi, m) * math.cos(phi) ** 2)


def sample_ellipsoid(axes, n, rng):
    """``n`` points uniformly distributed by area on an axis-aligned ellipsoid."""
    axes = np.asarray(axes, dtype=np.float64)
    out = []
    need = n
    g_max = 1.0 / axes.min()
    while need > 0:
        u = rng.normal(size=(max(2 * need, 64), 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        g = np.sqrt(((u / axes) ** 2).sum(axis=1))
        acc = u[rng.random(len(u)) < g / g_max][:need]
        out.append(acc * axes)
        need -= len(acc)
    return np.concatenate(out) if out else np.zeros((0, 3))


def _rotation(tilt, azimuth, spin):
    def rz(t):
        c, s = math.cos(t), math.sin(t)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    c, s = math.cos(tilt), math.sin(tilt)
    rx = np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])
    return rz(azimuth) @ rx @ rz(spin)


def _stem_hits(base, height, center, radius, clearance):
    """Does the vertical stem segment come within ``clearance`` of a head's bounding sphere?"""
    if center[2] - radius > height:
        return False
    return np.hypot(*(center[:2] - base[:2])) <= radius + clearance


def _clear_of(center, radius, base, height, centers, axes, stems, spec):
    clearance = spec.stem_radius + spec.min_gap / 2
    for q, ax, (q_base, q_height, _) in zip(centers, axes, stems):
        r = ax.max()
        if np.linalg.norm(center - q) <= radius + r + spec.min_gap:
            return False
        if _stem_hits(base, height, q, r, clearance) or _stem_hits(q_base, q_height, center, radius, clearance):
            return False
    return True


def _place_heads(spec, rng):
    """Rejection-sample head parameters with clearance between bounding spheres."""
    w, d = spec.plot_extent
    centers, axes, rotations, stems = [], [], [], []
    attempts = 0
    while len(centers) < spec.n_heads:
        attempts += 1
        if attempts > 20000 * max(1, spec.n_heads):
            raise ValueError("could not place heads; enlarge plot_extent or reduce n_heads")
        a, b = np.sort(rng.uniform(*spec.head_half_axes, size=2))
        c = rng.uniform(*spec.head_length)
        height = rng.uniform(*spec.stem_height)
        base = np.array([rng.uniform(-w / 2 + c, w / 2 - c), rng.uniform(-d / 2 + c, d / 2 - c), 0.0])
        R = _rotation(rng.uniform(0, spec.max_tilt), rng.uniform(0, 2 * math.pi), rng.uniform(0, 2 * math.pi))
        center = base + np.array([0, 0, height]) + R @ np.array([0, 0, c])
        if not _clear_of(center, c, base, height, centers, axes, stems, spec):
            continue
        centers.append(center)
        axes.append(np.array([a, b, c]))
        rotations.append(R)
        stems.append((base, height, spec.stem_radius))
    return centers, axes, rotations, stems


def generate_scene(spec):
    rng = np.random.default_rng(spec.seed)
    centers, axes, rotations, stems = _place_heads(spec, rng)
    chunks = []  # (xyz, part, instance)

    w, d = spec.plot_extent
    margin = 0.1
    n_ground = int(round(spec.ground_density * (w + 2 * margin) * (d + 2 * margin)))
    ground = np.column_stack([rng.uniform(-w / 2 - margin, w / 2 + margin, n_ground),
                              rng.uniform(-d / 2 - margin, d / 2 + margin, n_ground), np.zeros(n_ground)])
    chunks.append((ground, GROUND, -1))

    for base, height, radius in stems:
        n = int(round(spec.density * 2 * math.pi * radius * height))
        t = rng.uniform(0, 2 * math.pi, n)
        chunks.append((np.column_stack([base[0] + radius * np.cos(t), base[1] + radius * np.sin(t),
                                        rng.uniform(0, height, n)]), STEM, -1))

    n_leaves = rng.poisson(spec.occluder_density * w * d) if spec.occluder_density > 0 else 0
    for _ in range(n_leaves):
        r = rng.uniform(0.015, 0.03)
        n = int(round(spec.density * math.pi * r * r))
        rho, t = r * np.sqrt(rng.random(n)), rng.uniform(0, 2 * math.pi, n)
        disc = np.column_stack([rho * np.cos(t), rho * np.sin(t), np.zeros(n)])
        R = _rotation(rng.uniform(0.3, 1.2), rng.uniform(0, 2 * math.pi), 0.0)
        center = np.array([rng.uniform(-w / 2, w / 2), rng.uniform(-d / 2, d / 2), rng.uniform(0.03, spec.stem_height[0])])
        chunks.append((disc @ R.T + center, LEAF, -1))

    for h, (center, ax, R) in enumerate(zip(centers, axes, rotations)):
        n = max(1, int(round(spec.density * ellipsoid_area(*ax))))
        chunks.append((sample_ellipsoid(ax, n, rng) @ R.T + center, HEAD, h))

    xyz = np.concatenate([c[0] for c in chunks])
    part = np.concatenate([np.full(len(c[0]), c[1], np.int8) for c in chunks])
    instance = np.concatenate([np.full(len(c[0]), c[2], np.int32) for c in chunks])
    intensity = np.clip(np.vectorize(_INTENSITY.get)(part) + rng.uniform(-0.05, 0.05, len(part)), 0, 1) if len(part) else np.zeros(0)
    return OracleScene(
        xyz, intensity, instance, part,
        np.array(centers).reshape(-1, 3), np.array(axes).reshape(-1, 3), np.array(rotations).reshape(-1, 3, 3),
        stems, spec,
    )


# ---------------------------------------------------------------- scanning

def _inside_solid(scene, p):
    if p[2] <= 0:
        return True
    for center, ax, R in zip(scene.head_centers, scene.head_axes, scene.head_rotations):
        if np.sum(((R.T @ (p - center)) / ax) ** 2) <= 1.0:
            return True
    for base, height, radius in scene.stems:
        if np.hypot(*(p[:2] - base[:2])) <= radius and 0 <= p[2] <= height:
            return True
    return False


@dataclass(eq=False)
class ScanTruth:
    scene_index: np.ndarray
    instance: np.ndarray


def simulate_scan(scene, origin, rotation, resolution, station_id="s00"):
    """Nearest-point-per-angular-cell scan of the scene from one pose."""
    origin = np.asarray(origin, dtype=np.float64)
    rotation = check_rotation(rotation)
    resolution = check_positive(resolution, "resolution")
    if _inside_solid(scene, origin):
        raise PoseError(f"station {station_id} at {origin.tolist()} lies inside scene geometry")
    r, az, el = spherical_coordinates(to_sensor_frame(scene.xyz, origin, rotation))
    valid = np.flatnonzero(r > 0)
    col, row = angular_cells(az[valid], el[valid], resolution)
    key = (row - row.min()) * (col.max() - col.min() + 1) + (col - col.min()) if len(valid) else col
    order = np.lexsort((valid, r[valid], key))
    first = order[np.r_[True, key[order][1:] != key[order][:-1]]] if len(order) else order
    visible = np.sort(valid[first])
    station = ScanStation(station_id, origin, rotation, scene.xyz[visible], scene.intensity[visible])
    return station, ScanTruth(visible, scene.instance[visible])


def _yaw_towards(origin, target):
    t = math.atan2(target[1] - origin[1], target[0] - origin[0])
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# sensor y axis pointing straight down; keeps the nadir away from the poles
_DOWNWARD = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def default_station_poses(spec, n_stations=6, distance=0.9, side_height=0.6, top_height=1.0):
    """Side stations on a ring around the plot plus two stations above it."""
    n_top = min(2, max(0, n_stations - 3))
    n_side = n_stations - n_top
    poses = []
    for i in range(n_side):
        t = 2 * math.pi * i / n_side + math.pi / 4
        origin = np.array([distance * math.cos(t), distance * math.sin(t), side_height])
        poses.append((origin, _yaw_towards(origin, np.zeros(3))))
    w, _ = spec.plot_extent
    for i in range(n_top):
        x = (-1) ** i * w / 4
        poses.append((np.array([x, 0.0, top_height]), _DOWNWARD.copy()))
    return poses


# ---------------------------------------------------------------- oracle masks

def _pixel_owner(image, instance_of_point):
    """Plurality instance id per pixel (-2 for empty pixels, -1 background)."""
    n_pix = image.height * image.width
    counts = np.diff(image.pixmap_offsets)
    owner = np.full(n_pix, -2, dtype=np.int64)
    if len(image.pixmap_indices) == 0:
        return owner
    pix = np.repeat(np.arange(n_pix), counts)
    inst = instance_of_point[image.pixmap_indices].astype(np.int64)
    pairs, votes = np.unique(np.column_stack([pix, inst]), axis=0, return_counts=True)
    order = np.lexsort((pairs[:, 1], -votes, pairs[:, 0]))
    first = order[np.r_[True, pairs[order, 0][1:] != pairs[order, 0][:-1]]]
    owner[pairs[first, 0]] = pairs[first, 1]
    return owner


def _stream(seed, station_id, head, modality):
    return np.random.default_rng([int(seed), zlib.crc32(station_id.encode()), int(head) + 1, MODALITIES.index(modality)])


def emit_oracle_masks(station, truth, image, class_label="wheat", pixel_dropout=0.0, mask_dropout=0.0,
                      spurious_rate=0.0, split_rate=0.0, seed=0, min_pixels=1):
    """One mask per visible head and modality, covering the pixels it owns.

    Corruption draws come from an independent stream per (seed, station,
    head, modality), taken in this order: mask dropout, pixel dropout
    (one uniform per mask pixel in raster order), split, spurious mask.
    """
    instance_of_point = np.full(len(station), -1, dtype=np.int64)
    instance_of_point[:] = truth.instance
    owner = _pixel_owner(image, instance_of_point).reshape(image.shape)
    masks = []
    next_id = {m: 0 for m in MODALITIES}
    heads = np.unique(owner[owner >= 0])
    occupied = np.flatnonzero(owner.reshape(-1) >= -1)
    for head in heads:
        base = owner == head
        if base.sum() < min_pixels:
            continue
        for modality in MODALITIES:
            rng = _stream(seed, station.station_id, head, modality)
            if rng.random() < mask_dropout:
                continue
            raster = base.copy()
            if pixel_dropout > 0:
                flat = np.flatnonzero(raster.reshape(-1))
                drop = flat[rng.random(len(flat)) < pixel_dropout]
                raster.reshape(-1)[drop] = False
            if not raster.any():
                continue
            parts = [raster]
            if split_rate > 0 and rng.random() < split_rate:
                cols = np.nonzero(raster)[1]
                cut = np.median(cols)
                left = raster.copy()
                left[:, int(math.floor(cut)) + 1:] = False
                right = raster & ~left
                parts = [p for p in (left, right) if p.any()]
            if spurious_rate > 0 and rng.random() < spurious_rate and len(occupied):
                centre = occupied[rng.integers(len(occupied))]
                cy, cx = divmod(int(centre), image.width)
                radius = max(1.0, math.sqrt(base.sum() / math.pi))
                yy, xx = np.ogrid[:image.height, :image.width]
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
                parts.append(blob)
            for p in parts:
                masks.append(InstanceMask2D(station.station_id, modality, next_id[modality], class_label, 1.0, p))
                next_id[modality] += 1
    return MaskSet(masks)


def save_scene_truth(scene, path):
    doc = {
        "n_heads": scene.n_heads,
        "heads": [{"id": h, "centroid": c.tolist(), "semi_axes": a.tolist(), "n_points": int((scene.instance == h).sum())}
                  for h, (c, a) in enumerate(zip(scene.head_centers, scene.head_axes))],
        "spec": asdict(scene.spec) if scene.spec is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1))
