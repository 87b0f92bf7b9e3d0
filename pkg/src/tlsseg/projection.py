"""Spherical (panoramic) range/intensity images of single scan stations.

Image axes: columns follow azimuth (increasing to the right), rows follow
elevation (row 0 is the highest elevation). Every pixel keeps the full list
of station point indices that fell into it, so 2D masks can be mapped back
onto the original 3D points without loss.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import EmptyImageError, FormatError, ParameterError, check_count, check_positive
from .instances import PartialInstance

logger = logging.getLogger(__name__)

RANGE_UNIT = 1e-3  # metres per PNG grey level
MODALITIES = ("intensity", "range")


@dataclass(frozen=True)
class ProjectionParams:
    d_p: float = 0.003
    r_max: float = 6.0
    lanczos_a: int = 3
    native_resolution: float | None = None

    def __post_init__(self):
        check_positive(self.d_p, "d_p")
        check_positive(self.r_max, "r_max")
        check_count(self.lanczos_a, "lanczos_a")
        if self.native_resolution is not None:
            check_positive(self.native_resolution, "native_resolution")

    @property
    def angular_resolution(self):
        """Target rad/pixel: a pixel spans d_p at the maximum range."""
        return self.d_p / self.r_max


@dataclass(frozen=True, eq=False)
class SphericalImage:
    station_id: str
    resolution: float
    col0: int
    row_top: int
    range: np.ndarray
    intensity: np.ndarray
    pixmap_offsets: np.ndarray
    pixmap_indices: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.range.shape[0]

    @property
    def width(self):
        return self.range.shape[1]

    @property
    def shape(self):
        return self.range.shape

    @property
    def azimuth_range(self):
        return (self.col0 * self.resolution, (self.col0 + self.width) * self.resolution)

    @property
    def elevation_range(self):
        return ((self.row_top + 1 - self.height) * self.resolution, (self.row_top + 1) * self.resolution)

    def pixel_points(self, row, col):
        p = row * self.width + col
        return self.pixmap_indices[self.pixmap_offsets[p]:self.pixmap_offsets[p + 1]]

    def points_of_pixels(self, flat_pixels):
        """Concatenated point indices of the given flat pixel ids."""
        return _gather_csr(self.pixmap_offsets, self.pixmap_indices, np.asarray(flat_pixels, dtype=np.int64))

    def pixel_counts(self):
        return np.diff(self.pixmap_offsets).reshape(self.shape)


def _gather_csr(offsets, indices, rows):
    starts = offsets[rows].astype(np.int64)
    counts = offsets[rows + 1].astype(np.int64) - starts
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=indices.dtype)
    # position k of the output reads indices[starts[r] + (k - first[r])]
    first = np.cumsum(counts) - counts
    pos = np.arange(total) - np.repeat(first - starts, counts)
    return indices[pos]


def spherical_coordinates(sensor_xyz):
    """Range, azimuth and elevation of sensor-frame points."""
    x, y, z = sensor_xyz[:, 0], sensor_xyz[:, 1], sensor_xyz[:, 2]
    horizontal = np.hypot(x, y)
    return np.sqrt(horizontal**2 + z**2), np.arctan2(y, x), np.arctan2(z, horizontal)


def angular_cells(azimuth, elevation, resolution):
    return np.floor(azimuth / resolution).astype(np.int64), np.floor(elevation / resolution).astype(np.int64)


def estimate_native_resolution(station):
    """Median non-zero gap between sorted unique azimuths of the station."""
    _, az, _ = spherical_coordinates(station.sensor_coordinates())
    gaps = np.diff(np.unique(az))
    gaps = gaps[gaps > 0]
    if len(gaps) == 0:
        raise EmptyImageError(f"station {station.station_id}: cannot estimate angular resolution")
    return float(np.median(gaps))


def project_station(station, params, resolution=None):
    """Lossless panorama of one station at its native angular resolution.

    Points beyond ``r_max`` are dropped. When several points share a pixel
    the nearest one supplies range and intensity; all are kept in the map.
    """
    if len(station) == 0:
        raise EmptyImageError(f"station {station.station_id} has no points")
    if resolution is None:
        resolution = params.native_resolution or estimate_native_resolution(station)
    resolution = check_positive(resolution, "resolution")
    r, az, el = spherical_coordinates(station.sensor_coordinates())
    kept = np.flatnonzero(r <= params.r_max)
    if len(kept) == 0:
        raise EmptyImageError(f"station {station.station_id}: all points lie beyond r_max={params.r_max}")
    r, az, el = r[kept], az[kept], el[kept]
    col, erow = angular_cells(az, el, resolution)
    col0, row_top = int(col.min()), int(erow.max())
    width, height = int(col.max()) - col0 + 1, row_top - int(erow.min()) + 1
    flat = (row_top - erow) * width + (col - col0)

    order = np.lexsort((kept, r, flat))
    flat_sorted = flat[order]
    counts = np.bincount(flat_sorted, minlength=width * height)
    offsets = np.zeros(width * height + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    nearest = order[offsets[:-1][counts > 0]]

    range_img = np.zeros(width * height)
    intensity_img = np.zeros(width * height)
    occupied = np.flatnonzero(counts)
    range_img[occupied] = r[nearest]
    intensity_img[occupied] = station.intensity[kept[nearest]]
    logger.debug("station %s: %dx%d panorama, %d points", station.station_id, width, height, len(kept))
    return SphericalImage(
        station.station_id, resolution, col0, row_top,
        range_img.reshape(height, width), intensity_img.reshape(height, width),
        offsets, kept[order].astype(np.int64),
        meta={"r_max": params.r_max, "native_resolution": resolution},
    )


# ---------------------------------------------------------------- Lanczos

def lanczos_kernel(x, a):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def _axis_weights(n_in, n_out, scale, a):
    """Sparse (n_out, n_in) Lanczos weights for a downscale by ``scale``."""
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    reach = a * scale
    lo = np.maximum(np.ceil(centers - reach).astype(np.int64), 0)
    hi = np.minimum(np.floor(centers + reach).astype(np.int64), n_in - 1)
    counts = np.maximum(hi - lo + 1, 0)
    rows = np.repeat(np.arange(n_out), counts)
    cols = np.repeat(lo, counts) + (np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts))
    w = lanczos_kernel((cols - centers[rows]) / scale, a)
    nz = w != 0
    return sparse.csr_matrix((w[nz], (rows[nz], cols[nz])), shape=(n_out, n_in))


def _resample_channel(Wy, Wx, values):
    return np.asarray((Wx @ np.asarray(Wy @ values).T).T)


def _resampled_pixmap(image, Wy, Wx, rows_per_chunk=64):
    """Union of input pixel maps with positive separable weight, per output pixel."""
    H, W = image.shape
    h_out, w_out = Wy.shape[0], Wx.shape[0]
    occupied = image.pixel_counts().reshape(-1) > 0
    Wx = Wx.tocoo()
    x_sign = {s: (Wx.row[np.sign(Wx.data) == s], Wx.col[np.sign(Wx.data) == s]) for s in (1, -1)}
    Wy = Wy.tocsr()
    owners, sources = [], []
    for start in range(0, h_out, rows_per_chunk):
        chunk_owner, chunk_src = [], []
        for oy in range(start, min(start + rows_per_chunk, h_out)):
            lo, hi = Wy.indptr[oy], Wy.indptr[oy + 1]
            for iy, wy in zip(Wy.indices[lo:hi], Wy.data[lo:hi]):
                ox, ix = x_sign[1 if wy > 0 else -1]
                src = iy * W + ix
                keep = occupied[src]
                chunk_owner.append(oy * w_out + ox[keep])
                chunk_src.append(src[keep])
        if chunk_owner:
            owners.append(np.concatenate(chunk_owner))
            sources.append(np.concatenate(chunk_src))
    owner = np.concatenate(owners) if owners else np.zeros(0, np.int64)
    src = np.concatenate(sources) if sources else np.zeros(0, np.int64)
    order = np.lexsort((src, owner))
    owner, src = owner[order], src[order]
    counts_src = np.diff(image.pixmap_offsets)[src]
    per_owner = np.bincount(owner, weights=counts_src, minlength=h_out * w_out).astype(np.int64)
    offsets = np.zeros(h_out * w_out + 1, dtype=np.int64)
    np.cumsum(per_owner, out=offsets[1:])
    indices = _gather_csr(image.pixmap_offsets, image.pixmap_indices, src)
    return offsets, indices


def lanczos_resample(image, params):
    """Downscale a full-resolution panorama to ``params.angular_resolution``.

    Range and intensity use the separable Lanczos kernel normalised over
    non-empty contributors only, so empty background never bleeds into range.
    """
    target = params.angular_resolution
    scale = target / image.resolution
    if scale < 1.0 - 1e-9:
        raise ParameterError(
            f"target resolution {target:.3g} rad/px is finer than native {image.resolution:.3g}; only downscaling is supported"
        )
    meta = dict(image.meta, lanczos_a=params.lanczos_a, d_p=params.d_p, scale=scale)
    if abs(scale - 1.0) <= 1e-9:
        return replace(image, resolution=target, meta=meta)

    H, W = image.shape
    h_out, w_out = math.ceil(H / scale - 1e-9), math.ceil(W / scale - 1e-9)
    Wy = _axis_weights(H, h_out, scale, params.lanczos_a)
    Wx = _axis_weights(W, w_out, scale, params.lanczos_a)
    occupied = (image.range > 0).astype(np.float64)
    den = _resample_channel(Wy, Wx, occupied)
    num_r = _resample_channel(Wy, Wx, image.range * occupied)
    num_i = _resample_channel(Wy, Wx, image.intensity * occupied)
    valid = den > 1e-6 * scale * scale
    range_out = np.zeros((h_out, w_out))
    intensity_out = np.zeros((h_out, w_out))
    range_out[valid] = np.maximum(num_r[valid] / den[valid], 0.0)
    intensity_out[valid] = np.clip(num_i[valid] / den[valid], 0.0, 1.0)
    intensity_out[range_out <= 0] = 0.0
    offsets, indices = _resampled_pixmap(image, Wy, Wx)
    # column/row origin of the compressed grid in units of the target resolution
    col0 = image.col0 * image.resolution / target
    row_top = (image.row_top + 1) * image.resolution / target - 1
    return SphericalImage(image.station_id, target, col0, row_top, range_out, intensity_out, offsets, indices, meta)


def backproject_mask(image, mask, station):
    """Map a binary raster on ``image`` back to the station's 3D points.

    Returns None when the mask selects no points.
    """
    raster = mask.raster if hasattr(mask, "raster") else np.asarray(mask)
    if raster.shape != image.shape:
        raise FormatError(f"mask raster {raster.shape} does not match image {image.shape} of station {image.station_id}")
    index = np.unique(image.points_of_pixels(np.flatnonzero(raster.reshape(-1))))
    if len(index) == 0:
        return None
    return PartialInstance(
        station.xyz[index],
        class_label=getattr(mask, "class_label", "object"),
        confidence=getattr(mask, "confidence", 1.0),
        station_id=station.station_id,
        modality=getattr(mask, "modality", "range"),
        point_index=index,
    )


# ---------------------------------------------------------------- files

def save_image(image, out_dir, provenance=None):
    """Write the PNG pair, the geometry sidecar and the pixel-map index file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = image.station_id
    intensity = np.round(np.clip(image.intensity, 0, 1) * 65535).astype(np.uint16)
    rng = np.round(np.clip(image.range / RANGE_UNIT, 0, 65535)).astype(np.uint16)
    Image.fromarray(intensity).save(out / f"{sid}_intensity.png")
    Image.fromarray(rng).save(out / f"{sid}_range.png")
    geom = {
        "station_id": sid,
        "width": image.width,
        "height": image.height,
        "angular_resolution": image.resolution,
        "col0": image.col0,
        "row_top": image.row_top,
        "azimuth_range": list(image.azimuth_range),
        "elevation_range": list(image.elevation_range),
        "range_unit": RANGE_UNIT,
        "row_order": "descending_elevation",
        **{k: v for k, v in image.meta.items()},
    }
    if provenance is not None:
        geom["provenance"] = provenance
    (out / f"{sid}_geom.json").write_text(json.dumps(geom, indent=2, sort_keys=True))
    with open(out / f"{sid}_pixmap.bin", "wb") as fh:
        fh.write(np.asarray(image.pixmap_offsets, dtype="<u4").tobytes())
        fh.write(np.asarray(image.pixmap_indices, dtype="<u4").tobytes())


def load_geometry(path):
    geom = json.loads(Path(path).read_text())
    for key in ("station_id", "width", "height", "angular_resolution"):
        if key not in geom:
            raise FormatError(f"{path}: geometry sidecar lacks '{key}'")
    return geom


def load_image(image_dir, station_id):
    """Rebuild a (quantised) SphericalImage from the files of :func:`save_image`."""
    d = Path(image_dir)
    geom = load_geometry(d / f"{station_id}_geom.json")
    h, w = geom["height"], geom["width"]
    raw = np.fromfile(d / f"{station_id}_pixmap.bin", dtype="<u4")
    if len(raw) < h * w + 1:
        raise FormatError(f"{station_id}_pixmap.bin is truncated")
    offsets = raw[: h * w + 1].astype(np.int64)
    indices = raw[h * w + 1:].astype(np.int64)
    if offsets[-1] != len(indices):
        raise FormatError(f"{station_id}_pixmap.bin: offsets do not match index count")
    rng = np.asarray(Image.open(d / f"{station_id}_range.png"), dtype=np.float64) * geom.get("range_unit", RANGE_UNIT)
    intensity = np.asarray(Image.open(d / f"{station_id}_intensity.png"), dtype=np.float64) / 65535
    if rng.shape != (h, w):
        raise FormatError(f"{station_id}_range.png has shape {rng.shape}, sidecar says {(h, w)}")
    meta = {k: geom[k] for k in ("r_max", "native_resolution", "lanczos_a", "d_p", "scale") if k in geom}
    return SphericalImage(station_id, geom["angular_resolution"], geom.get("col0", 0), geom.get("row_top", 0),
                          rng, intensity, offsets, indices, meta)


class SphericalProjector(TransformerMixin, BaseEstimator):
    """Station -> compressed panorama, as an sklearn-style transformer.

    ``fit`` fixes the native angular resolution (from ``native_resolution``
    or estimated from the first station); ``transform`` maps one station or a
    list of stations to compressed :class:`SphericalImage` objects.
    """

    def __init__(self, d_p=0.003, r_max=6.0, lanczos_a=3, native_resolution=None):
        self.d_p = d_p
        self.r_max = r_max
        self.lanczos_a = lanczos_a
        self.native_resolution = native_resolution

    def _params(self):
        return ProjectionParams(self.d_p, self.r_max, self.lanczos_a, self.native_resolution)

    def fit(self, X, y=None):
        params = self._params()
        stations = [X] if not isinstance(X, (list, tuple)) else list(X)
        if params.native_resolution is not None:
            self.native_resolution_ = params.native_resolution
        else:
            self.native_resolution_ = float(np.median([estimate_native_resolution(s) for s in stations]))
        return self

    def transform(self, X):
        check_is_fitted(self, "native_resolution_")
        params = self._params()
        single = not isinstance(X, (list, tuple))
        images = [lanczos_resample(project_station(s, params, self.native_resolution_), params)
                  for s in ([X] if single else X)]
        return images[0] if single else images
