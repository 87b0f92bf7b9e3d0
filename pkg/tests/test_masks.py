import json

import numpy as np
import pytest
from PIL import Image

from tlsseg import FormatError
from tlsseg.masks import InstanceMask2D, MaskSet, filter_masks, load_masks, save_masks


def mask(sid="s00", modality="intensity", mask_id=0, cls="wheat", conf=0.9, shape=(4, 5), seed=0):
    raster = np.random.default_rng(seed).random(shape) < 0.5
    raster[0, 0] = True
    return InstanceMask2D(sid, modality, mask_id, cls, conf, raster)


def write_manifest(path, entries):
    path.write_text(json.dumps(entries))
    return path


def test_empty_manifest(tmp_path):
    assert len(load_masks(write_manifest(tmp_path / "m.json", []))) == 0


def test_single_entry(tmp_path):
    Image.fromarray(np.array([[0, 255], [255, 0]], np.uint8)).save(tmp_path / "a.png")
    entry = {"station_id": "s00", "modality": "range", "mask_id": 1, "class": "wheat", "confidence": 0.5, "png_path": "a.png"}
    masks = load_masks(write_manifest(tmp_path / "m.json", [entry]))
    assert len(masks) == 1
    np.testing.assert_array_equal(masks[0].raster, [[False, True], [True, False]])


def test_duplicate_key(tmp_path):
    Image.fromarray(np.full((2, 2), 255, np.uint8)).save(tmp_path / "a.png")
    entry = {"station_id": "s00", "modality": "range", "mask_id": 1, "class": "wheat", "confidence": 0.5, "png_path": "a.png"}
    with pytest.raises(FormatError, match="duplicate"):
        load_masks(write_manifest(tmp_path / "m.json", [entry, entry]))


def test_dimension_mismatch(tmp_path):
    Image.fromarray(np.full((2, 2), 255, np.uint8)).save(tmp_path / "a.png")
    entry = {"station_id": "s00", "modality": "range", "mask_id": 1, "class": "wheat", "confidence": 0.5, "png_path": "a.png"}
    with pytest.raises(FormatError, match="does not match"):
        load_masks(write_manifest(tmp_path / "m.json", [entry]), geometry={"s00": (3, 2)})


def test_field_validation():
    with pytest.raises(FormatError):
        mask(conf=1.5)
    with pytest.raises(FormatError):
        mask(modality="rgb")
    with pytest.raises(FormatError):
        InstanceMask2D("s", "range", 0, "wheat", 1.0, np.zeros((3, 3)))


def test_missing_manifest_key(tmp_path):
    with pytest.raises(FormatError, match="confidence"):
        load_masks(write_manifest(tmp_path / "m.json", [{"station_id": "s", "modality": "range", "mask_id": 0,
                                                           "class": "w", "png_path": "x.png"}]))


def test_save_load_round_trip(tmp_path):
    masks = MaskSet([mask(mask_id=i, seed=i, modality=m) for i in range(3) for m in ("intensity", "range")])
    manifest = save_masks(masks, tmp_path)
    back = load_masks(manifest, geometry={"s00": (4, 5)})
    assert [m.key for m in back] == [m.key for m in masks]
    for a, b in zip(masks, back):
        np.testing.assert_array_equal(a.raster, b.raster)
        assert (a.class_label, a.confidence) == (b.class_label, b.confidence)


def test_groups():
    masks = MaskSet([mask("s01", "range", 0), mask("s00", "range", 0), mask("s00", "intensity", 0)])
    assert list(masks.groups()) == [("s00", "intensity"), ("s00", "range"), ("s01", "range")]


def test_filter_masks():
    masks = MaskSet([mask(mask_id=i, conf=c, cls=k) for i, (c, k) in enumerate([(0.2, "wheat"), (0.6, "leaf"), (0.9, "wheat")])])
    assert [m.key for m in filter_masks(masks)] == [m.key for m in masks]
    assert len(filter_masks(masks, min_confidence=0.95)) == 0
    assert {m.class_label for m in filter_masks(masks, classes={"wheat"})} == {"wheat"}
    sizes = [len(filter_masks(masks, t)) for t in np.linspace(0, 1, 11)]
    assert sizes == sorted(sizes, reverse=True)
