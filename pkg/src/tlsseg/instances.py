"""Partial (single-view) and merged 3D instances, plus their file formats."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import FormatError, check_points
from .obb import OBB, compute_obb
from .scan_io import PointCloud, read_cloud, write_cloud


@dataclass(eq=False)
class PartialInstance:
    """Points of one object seen through one 2D mask of one station/modality."""

    xyz: np.ndarray
    class_label: str = "object"
    confidence: float = 1.0
    station_id: str = ""
    modality: str = "range"
    point_index: np.ndarray | None = None
    obb: OBB = field(default=None)

    def __post_init__(self):
        self.xyz = check_points(self.xyz, name="partial instance points", allow_empty=False)
        if self.obb is None:
            self.obb = compute_obb(self.xyz)

    def __len__(self):
        return len(self.xyz)


@dataclass(eq=False)
class Instance:
    instance_id: int
    class_label: str
    xyz: np.ndarray
    support_count: int = 1
    score: float | None = None
    obb: OBB = field(default=None)

    def __post_init__(self):
        self.xyz = check_points(self.xyz, name="instance points", allow_empty=False)
        if self.obb is None:
            self.obb = compute_obb(self.xyz)

    def __len__(self):
        return len(self.xyz)


class InstanceSet(list):
    """A list of :class:`Instance` with unique ids."""

    def __init__(self, instances=()):
        super().__init__(instances)
        ids = [inst.instance_id for inst in self]
        if len(set(ids)) != len(ids):
            raise FormatError("instance ids must be unique")

    @property
    def class_names(self):
        return sorted({inst.class_label for inst in self})

    def to_cloud(self, class_ids=None):
        """All instance points as one labeled cloud (P_q)."""
        class_ids = class_ids or {name: i + 1 for i, name in enumerate(self.class_names)}
        if not self:
            return PointCloud(np.zeros((0, 3)), None, np.zeros(0, np.uint16), np.zeros(0, np.int32))
        xyz = np.concatenate([inst.xyz for inst in self])
        semantic = np.concatenate([np.full(len(inst), class_ids[inst.class_label]) for inst in self])
        instance = np.concatenate([np.full(len(inst), inst.instance_id) for inst in self])
        return PointCloud(xyz, None, semantic, instance)


def instances_from_cloud(cloud, class_names=None):
    """Group a labeled cloud by instance id (>= 0) into an InstanceSet."""
    if cloud.instance is None:
        raise FormatError("labeled cloud has no 'instance' property")
    semantic = cloud.semantic if cloud.semantic is not None else np.ones(len(cloud), np.uint16)
    names = {v: k for k, v in (class_names or {}).items()}
    out = []
    for iid in np.unique(cloud.instance[cloud.instance >= 0]):
        members = np.flatnonzero(cloud.instance == iid)
        sem = np.bincount(semantic[members]).argmax()
        out.append(Instance(int(iid), names.get(int(sem), str(int(sem))), cloud.xyz[members]))
    return InstanceSet(out)


def save_instances(instances, out_dir, provenance=None, stem="instances"):
    """Write ``<stem>.ply`` (labeled points) and ``<stem>.json`` (per-instance records)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    class_ids = {name: i + 1 for i, name in enumerate(instances.class_names)}
    write_cloud(out / f"{stem}.ply", instances.to_cloud(class_ids))
    doc = {
        "classes": class_ids,
        "instances": [
            {
                "instance_id": inst.instance_id,
                "class": inst.class_label,
                "support_count": inst.support_count,
                "n_points": len(inst),
                "score": inst.score,
                "obb": inst.obb.to_dict(),
            }
            for inst in instances
        ],
    }
    if provenance is not None:
        doc["provenance"] = provenance
    (out / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_instances(path):
    """Load predictions from a labeled PLY or a directory / JSON written by :func:`save_instances`."""
    path = Path(path)
    if path.is_dir():
        path = path / "instances.ply"
    if path.suffix == ".json":
        path = path.with_suffix(".ply")
    if not path.exists():
        raise FormatError(f"prediction file {path} does not exist")
    sidecar = path.with_suffix(".json")
    records, classes = {}, None
    if sidecar.exists():
        doc = json.loads(sidecar.read_text())
        classes = doc.get("classes")
        records = {r["instance_id"]: r for r in doc.get("instances", [])}
    result = instances_from_cloud(read_cloud(path), classes)
    for inst in result:
        rec = records.get(inst.instance_id)
        if rec is not None:
            inst.support_count = rec.get("support_count", 1)
            inst.score = rec.get("score")
    return result
