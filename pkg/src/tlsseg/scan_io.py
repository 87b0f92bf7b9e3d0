"""Registered scan stations, point clouds, PLY I/O and voxel downsampling."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

from ._validation import (
    FormatError,
    ParameterError,
    check_count,
    check_points,
    check_positive,
    check_rotation,
)

logger = logging.getLogger(__name__)

INTENSITY_FIELDS = ("intensity", "scalar_intensity", "scalar_Intensity", "reflectance")
NULL_INSTANCE = -1


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def to_sensor_frame(xyz, origin, rotation):
    """``(xyz - origin) @ rotation`` evaluated element-wise.

    Written out per component so that the result for a point never depends
    on how many other points are transformed with it.
    """
    d = np.asarray(xyz, dtype=np.float64) - origin
    R = rotation
    return np.column_stack([d[:, 0] * R[0, k] + d[:, 1] * R[1, k] + d[:, 2] * R[2, k] for k in range(3)])


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable point set with optional intensity and per-point labels.

    Point indices are stable 0-based row numbers into ``xyz``.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None

    def __post_init__(self):
        xyz = check_points(self.xyz)
        object.__setattr__(self, "xyz", _frozen(xyz))
        n = len(xyz)
        for name, dtype in (("intensity", np.float64), ("semantic", np.uint16), ("instance", np.int32)):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.asarray(value).astype(dtype, copy=False).reshape(-1)
            if len(value) != n:
                raise FormatError(f"{name} has {len(value)} entries for {n} points")
            object.__setattr__(self, name, _frozen(value))

    def __len__(self):
        return len(self.xyz)

    def subset(self, index):
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return PointCloud(self.xyz[index], pick(self.intensity), pick(self.semantic), pick(self.instance))


@dataclass(frozen=True, eq=False)
class ScanStation:
    """One registered scan: sensor pose in the LCS plus its points (LCS).

    ``rotation`` maps sensor-frame vectors into the LCS, so a point ``p`` has
    sensor coordinates ``(p - origin) @ rotation``.
    """

    station_id: str
    origin: np.ndarray
    rotation: np.ndarray
    xyz: np.ndarray
    intensity: np.ndarray = field(default=None)

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        rotation = check_rotation(self.rotation)
        xyz = check_points(self.xyz)
        intensity = np.zeros(len(xyz)) if self.intensity is None else np.asarray(self.intensity, dtype=np.float64)
        if intensity.shape != (len(xyz),):
            raise FormatError(f"station {self.station_id}: intensity length does not match point count")
        ranges = np.linalg.norm(xyz - origin, axis=1)
        if np.any(ranges <= 0):
            raise FormatError(f"station {self.station_id}: points coincide with the sensor origin")
        object.__setattr__(self, "origin", _frozen(origin))
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(intensity))

    def __len__(self):
        return len(self.xyz)

    def sensor_coordinates(self):
        return to_sensor_frame(self.xyz, self.origin, self.rotation)

    def to_cloud(self):
        return PointCloud(self.xyz, self.intensity)


# ---------------------------------------------------------------- PLY

def read_ply(path):
    """Read a PLY vertex element into a dict of 1-D arrays (ASCII or binary)."""
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:  # plyfile raises a zoo of exception types
        raise FormatError(f"{path}: not a readable PLY file ({exc})") from exc
    if "vertex" not in ply:
        raise FormatError(f"{path}: PLY has no 'vertex' element")
    vertex = ply["vertex"].data
    return {name: np.asarray(vertex[name]) for name in vertex.dtype.names}


def write_ply(path, xyz, intensity=None, semantic=None, instance=None, comments=(), text=False):
    """Write points (and optional intensity / labels) as a PLY vertex element.

    Coordinates are stored as doubles so that a read-back is bit-exact.
    """
    xyz = check_points(xyz)
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    columns = [xyz[:, 0], xyz[:, 1], xyz[:, 2]]
    for name, value, dtype in (("intensity", intensity, "f4"), ("semantic", semantic, "u2"), ("instance", instance, "i4")):
        if value is not None:
            fields.append((name, dtype))
            columns.append(np.asarray(value))
    data = np.empty(len(xyz), dtype=fields)
    for (name, _), col in zip(fields, columns):
        data[name] = col
    element = PlyElement.describe(data, "vertex")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([element], text=text, byte_order="<", comments=list(comments)).write(str(path))


def write_cloud(path, cloud, comments=()):
    write_ply(path, cloud.xyz, cloud.intensity, cloud.semantic, cloud.instance, comments=comments)


def read_cloud(path):
    """Read a (possibly labeled) cloud written by :func:`write_cloud`."""
    v = read_ply(path)
    for axis in "xyz":
        if axis not in v:
            raise FormatError(f"{path}: missing vertex field '{axis}'")
    xyz = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
    intensity = next((v[f] for f in INTENSITY_FIELDS if f in v), None)
    return PointCloud(xyz, intensity, v.get("semantic"), v.get("instance"))


# ---------------------------------------------------------------- loading

def load_pose_manifest(source):
    """Parse ``{station_id: {origin: [3], rotation: [9 row-major]}}``."""
    if isinstance(source, (str, Path)):
        try:
            source = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"pose manifest is not valid JSON: {exc}") from exc
    poses = {}
    for station_id, entry in source.items():
        if isinstance(entry, tuple):
            poses[str(station_id)] = (np.asarray(entry[0], dtype=np.float64).reshape(3), check_rotation(entry[1]))
            continue
        try:
            origin = np.asarray(entry["origin"], dtype=np.float64)
            rotation = np.asarray(entry["rotation"], dtype=np.float64)
        except KeyError as exc:
            raise FormatError(f"pose for station {station_id!r} lacks {exc}") from exc
        if origin.shape != (3,):
            raise FormatError(f"pose for station {station_id!r}: origin must have 3 entries")
        poses[str(station_id)] = (origin, check_rotation(rotation))
    return poses


def normalize_intensity(raw):
    """Per-station min-max scaling to [0, 1]; a constant channel is only clipped."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    return np.clip(raw, 0.0, 1.0)


def load_scans(paths, poses, normalize=True):
    """Load station PLY files (points in the LCS) and attach their poses.

    The station id of each file is its stem; ``poses`` is a manifest path or
    an already parsed dict.
    """
    poses = load_pose_manifest(poses)
    stations = []
    for path in paths:
        path = Path(path)
        station_id = path.stem
        v = read_ply(path)
        for name in ("x", "y", "z"):
            if name not in v:
                raise FormatError(f"{path}: missing vertex field '{name}'")
        field_name = next((f for f in INTENSITY_FIELDS if f in v), None)
        if field_name is None:
            raise FormatError(f"{path}: missing vertex field 'intensity'")
        if station_id not in poses:
            raise FormatError(f"{path}: station {station_id!r} has no entry in the pose manifest")
        origin, rotation = poses[station_id]
        xyz = np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64)
        intensity = v[field_name].astype(np.float64)
        keep = np.linalg.norm(xyz - origin, axis=1) > 0
        if not keep.all():
            logger.warning("station %s: dropped %d points at the sensor origin", station_id, (~keep).sum())
            xyz, intensity = xyz[keep], intensity[keep]
        if normalize:
            intensity = normalize_intensity(intensity)
        stations.append(ScanStation(station_id, origin, rotation, xyz, intensity))
    logger.info("loaded %d stations, %d points", len(stations), sum(len(s) for s in stations))
    return stations


# ---------------------------------------------------------------- geometry

def voxel_downsample(cloud, spacing):
    """Replace the members of every occupied cubic voxel by their centroid.

    Members are summed in lexicographic coordinate order, so the result does
    not depend on the input point order. Output points are sorted by voxel key.
    """
    spacing = check_positive(spacing, "spacing")
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    n = len(cloud)
    if n == 0:
        return PointCloud(np.zeros((0, 3)), None if cloud.intensity is None else np.zeros(0))
    xyz = cloud.xyz
    keys = np.floor(xyz / spacing).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0], inverse))
    sorted_inv = inverse[order]
    starts = np.flatnonzero(np.r_[True, sorted_inv[1:] != sorted_inv[:-1]])
    counts = np.diff(np.r_[starts, n])
    members = xyz[order]
    centroid = np.add.reduceat(members, starts, axis=0) / counts[:, None]
    # rounding in the mean must not push a centroid out of its voxel
    centroid = np.clip(centroid, np.minimum.reduceat(members, starts, axis=0), np.maximum.reduceat(members, starts, axis=0))
    intensity = None
    if cloud.intensity is not None:
        intensity = np.add.reduceat(cloud.intensity[order], starts) / counts
    return PointCloud(centroid, intensity)


def merge_clouds(stations, spacing):
    """Concatenate station clouds in the LCS and voxel-downsample them (P_t)."""
    if len(stations) == 0:
        raise ParameterError("merge_clouds needs at least one station")
    xyz = np.concatenate([s.xyz for s in stations])
    intensity = np.concatenate([s.intensity for s in stations])
    return voxel_downsample(PointCloud(xyz, intensity), spacing)


def statistical_outlier_filter(cloud, k_nn=8, stdev_mult=3.0, return_mask=False):
    """Drop points whose mean k-NN distance exceeds mean + stdev_mult * std."""
    k_nn = check_count(k_nn, "k_nn")
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    n = len(cloud)
    keep = np.ones(n, dtype=bool)
    if n < k_nn + 1:
        logger.warning("outlier filter skipped: %d points for k_nn=%d", n, k_nn)
    elif np.isfinite(stdev_mult):
        dist, _ = cKDTree(cloud.xyz).query(cloud.xyz, k=k_nn + 1)
        mean_d = dist[:, 1:].mean(axis=1)
        mu, sigma = mean_d.mean(), mean_d.std()
        keep = mean_d <= mu + stdev_mult * sigma + 1e-12 * max(mu, 1.0)
    out = cloud.subset(np.flatnonzero(keep))
    return (out, keep) if return_mask else out
