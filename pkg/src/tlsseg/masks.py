"""Exchange format for 2D instance masks produced by an external segmenter.

A manifest (``masks_manifest.json``) lists one entry per mask::

    {"station_id": "s00", "modality": "intensity", "mask_id": 3,
     "class": "wheat", "confidence": 0.87, "png_path": "s00_intensity_0003.png"}

Each PNG is an 8-bit raster, 0 = background, 255 = mask, whose size equals
the compressed panorama of that station.
"""

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import FormatError
from .projection import MODALITIES, load_geometry


@dataclass(eq=False)
class InstanceMask2D:
    station_id: str
    modality: str
    mask_id: int
    class_label: str
    confidence: float
    raster: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise FormatError(f"mask {self.key}: modality must be one of {MODALITIES}")
        if not 0.0 <= float(self.confidence) <= 1.0:
            raise FormatError(f"mask {self.key}: confidence {self.confidence} outside [0, 1]")
        self.raster = np.asarray(self.raster, dtype=bool)
        if self.raster.ndim != 2:
            raise FormatError(f"mask {self.key}: raster must be 2-D")
        if not self.raster.any():
            raise FormatError(f"mask {self.key}: raster is empty")

    @property
    def key(self):
        return (self.station_id, self.modality, self.mask_id)

    @property
    def area(self):
        return int(self.raster.sum())


class MaskSet(list):
    """Masks with unique (station_id, modality, mask_id) keys."""

    def __init__(self, masks=()):
        super().__init__(masks)
        seen = set()
        for m in self:
            if m.key in seen:
                raise FormatError(f"duplicate mask key {m.key}")
            seen.add(m.key)

    def groups(self):
        out = defaultdict(list)
        for m in self:
            out[(m.station_id, m.modality)].append(m)
        return dict(sorted(out.items()))


def _expected_shapes(geometry):
    if geometry is None:
        return {}
    if isinstance(geometry, dict):
        return geometry
    shapes = {}
    for path in sorted(Path(geometry).glob("*_geom.json")):
        g = load_geometry(path)
        shapes[g["station_id"]] = (g["height"], g["width"])
    return shapes


def load_masks(manifest_path, geometry=None):
    """Read and validate a mask manifest.

    ``geometry`` is a directory of ``*_geom.json`` sidecars or a dict
    ``station_id -> (height, width)``; defaults to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise FormatError(f"{manifest_path}: manifest must be a JSON array")
    shapes = _expected_shapes(base if geometry is None else geometry)
    masks = []
    for entry in entries:
        try:
            sid, modality, mask_id = str(entry["station_id"]), entry["modality"], int(entry["mask_id"])
            cls, conf, png = entry["class"], float(entry["confidence"]), entry["png_path"]
        except KeyError as exc:
            raise FormatError(f"{manifest_path}: manifest entry lacks {exc}") from exc
        raster = np.asarray(Image.open(base / png))
        if raster.ndim == 3:
            raster = raster[..., 0]
        expected = shapes.get(sid)
        if expected is not None and tuple(raster.shape) != tuple(expected):
            raise FormatError(f"mask {png}: size {raster.shape} does not match panorama {tuple(expected)} of station {sid}")
        masks.append(InstanceMask2D(sid, modality, mask_id, cls, conf, raster > 127))
    return MaskSet(masks)


def save_masks(masks, out_dir, manifest_name="masks_manifest.json"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in masks:
        png = f"{m.station_id}_{m.modality}_{m.mask_id:04d}.png"
        Image.fromarray(np.where(m.raster, 255, 0).astype(np.uint8)).save(out / png)
        entries.append({
            "station_id": m.station_id, "modality": m.modality, "mask_id": m.mask_id,
            "class": m.class_label, "confidence": m.confidence, "png_path": png,
        })
    path = out / manifest_name
    path.write_text(json.dumps(entries, indent=1))
    return path


def filter_masks(masks, min_confidence=0.0, classes=()):
    classes = set(classes)
    return MaskSet(m for m in masks if m.confidence >= min_confidence and (not classes or m.class_label in classes))
