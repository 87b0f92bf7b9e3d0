"""Pseudo-labels for a downstream 3D network.

Fused instance labels are transferred onto the merged scan cloud P_t by
radius-limited nearest-neighbour lookup, smoothed by a neighbourhood vote,
and cleaned instance by instance. The labeled cloud is then cut into
overlapping spheres for training.
"""

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive
from .instances import InstanceSet
from .scan_io import NULL_INSTANCE, PointCloud, write_ply

NULL_SEMANTIC = 0
VOTE_RADIUS_FACTOR = 1.2 * math.sqrt(3.0)


def vote_radius(d_p):
    return d_p * VOTE_RADIUS_FACTOR


def _with_labels(cloud, semantic, instance):
    return PointCloud(cloud.xyz, cloud.intensity, semantic, instance)


def _null_labels(n):
    return np.zeros(n, np.uint16), np.full(n, NULL_INSTANCE, np.int32)


def transfer_labels(target, instances, d_p, class_ids=None):
    """Copy labels of the nearest instance point within ``d_p`` (inclusive)."""
    d_p = check_positive(d_p, "d_p")
    semantic, instance = _null_labels(len(target))
    query = instances.to_cloud(class_ids) if isinstance(instances, InstanceSet) else instances
    if len(query) == 0 or len(target) == 0:
        return _with_labels(target, semantic, instance)
    dist, idx = cKDTree(query.xyz).query(target.xyz, k=1, distance_upper_bound=np.nextafter(d_p, np.inf))
    hit = np.isfinite(dist)
    semantic[hit] = query.semantic[idx[hit]]
    instance[hit] = query.instance[idx[hit]]
    return _with_labels(target, semantic, instance)


def refine_majority_vote(cloud, d_p, weighting="inverse_distance", allow_null=True):
    """Jointly re-vote (semantic, instance) over a ``d_p * 1.2 * sqrt(3)`` ball.

    The point itself takes part in its vote. Inverse-distance weights are
    ``1 / (distance + d_p / 10)``. Ties keep the current label if it is among
    the winners, otherwise the smallest (semantic, instance) pair wins.
    """
    d_p = check_positive(d_p, "d_p")
    n = len(cloud)
    if n == 0:
        return cloud
    pairs = np.column_stack([cloud.semantic.astype(np.int64), cloud.instance.astype(np.int64)])
    labels, label_id = np.unique(pairs, axis=0, return_inverse=True)
    label_id = label_id.reshape(-1)
    null_id = np.flatnonzero((labels[:, 0] == NULL_SEMANTIC) & (labels[:, 1] == NULL_INSTANCE))

    ij = cKDTree(cloud.xyz).query_pairs(vote_radius(d_p), output_type="ndarray")
    pair_dist = np.linalg.norm(cloud.xyz[ij[:, 0]] - cloud.xyz[ij[:, 1]], axis=1)
    voter = np.r_[np.arange(n), ij[:, 0], ij[:, 1]]
    target = np.r_[np.arange(n), ij[:, 1], ij[:, 0]]
    dist = np.r_[np.zeros(n), pair_dist, pair_dist]
    if weighting == "inverse_distance":
        weight = 1.0 / (dist + d_p / 10.0)
    elif weighting == "uniform":
        weight = np.ones_like(dist)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    vote = label_id[voter]
    if not allow_null and len(null_id):
        # points without any non-null vote keep their label
        keep = vote != null_id[0]
        target, vote, weight = target[keep], vote[keep], weight[keep]

    key = target * len(labels) + vote
    ukey, inv = np.unique(key, return_inverse=True)
    total = np.bincount(inv.reshape(-1), weights=weight)
    pt, lab = ukey // len(labels), ukey % len(labels)
    is_current = lab == label_id[pt]
    order = np.lexsort((lab, ~is_current, -total, pt))
    first = order[np.r_[True, pt[order][1:] != pt[order][:-1]]]
    new_id = label_id.copy()
    new_id[pt[first]] = lab[first]
    return _with_labels(cloud, labels[new_id, 0], labels[new_id, 1])


def instance_majority_reset(cloud, fraction=0.8):
    """Unify each instance's class if one class holds >= ``fraction`` of its points, else null it."""
    semantic = cloud.semantic.copy()
    instance = cloud.instance.copy()
    ratio = Fraction(str(fraction)).limit_denominator(10**6)
    num, den = ratio.numerator, ratio.denominator
    for iid in np.unique(instance[instance >= 0]):
        members = np.flatnonzero(instance == iid)
        counts = np.bincount(semantic[members].astype(np.int64))
        counts[NULL_SEMANTIC] = 0
        top = int(counts.argmax())
        if counts[top] > 0 and counts[top] * den >= num * len(members):
            semantic[members] = top
        else:
            semantic[members] = NULL_SEMANTIC
            instance[members] = NULL_INSTANCE
    return _with_labels(cloud, semantic, instance)


# ---------------------------------------------------------------- spheres

@dataclass(eq=False)
class SphereSample:
    center: np.ndarray
    radius: float
    index: np.ndarray
    xyz: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    augmentation: dict = field(default_factory=dict)


def sphere_grid(bounds_min, bounds_max, stride):
    """Centres of a cubic grid of pitch ``stride`` centred on the box."""
    extent = np.asarray(bounds_max, float) - np.asarray(bounds_min, float)
    counts = np.maximum(1, np.ceil(extent / stride - 1e-9).astype(int))
    start = np.asarray(bounds_min, float) + (extent - (counts - 1) * stride) / 2
    axes = [start[d] + stride * np.arange(counts[d]) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def sample_spheres(cloud, radius=0.12, stride=None):
    """Overlapping spheres on a grid; empty spheres are dropped.

    Every point is covered when ``stride <= 2 * radius / sqrt(3)``; the
    default stride is ``radius``.
    """
    radius = check_positive(radius, "radius")
    stride = radius if stride is None else check_positive(stride, "stride")
    if len(cloud) == 0:
        return []
    centers = sphere_grid(cloud.xyz.min(axis=0), cloud.xyz.max(axis=0), stride)
    tree = cKDTree(cloud.xyz)
    semantic = cloud.semantic if cloud.semantic is not None else np.zeros(len(cloud), np.uint16)
    instance = cloud.instance if cloud.instance is not None else np.full(len(cloud), NULL_INSTANCE, np.int32)
    samples = []
    for center, members in zip(centers, tree.query_ball_point(centers, radius)):
        if not members:
            continue
        idx = np.sort(np.asarray(members, dtype=np.int64))
        samples.append(SphereSample(center, radius, idx, cloud.xyz[idx].copy(), semantic[idx].copy(), instance[idx].copy()))
    return samples


def _rotation_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment_sphere(sample, seed, noise_std=0.0003, max_rotation=math.pi, scale_range=(0.9, 1.1),
                   flip_probability=0.5, rotation=None, scale=None, flip=None):
    """Noise, rotation about Z, anisotropic scale, optional X flip, in that order.

    Geometry is transformed about the sphere centre; labels are untouched.
    ``rotation``, ``scale`` and ``flip`` override the random draws.
    """
    rng = np.random.default_rng(seed)
    local = sample.xyz - sample.center
    noise = rng.normal(0.0, noise_std, size=local.shape) if noise_std > 0 else np.zeros_like(local)
    angle = rng.uniform(-max_rotation, max_rotation) if rotation is None else float(rotation)
    factors = rng.uniform(*scale_range, size=3) if scale is None else np.asarray(scale, dtype=float)
    flipped = bool(rng.random() < flip_probability) if flip is None else bool(flip)
    local = (local + noise) @ _rotation_z(angle).T
    local = local * factors
    if flipped:
        local[:, 0] = -local[:, 0]
    record = {"seed": int(seed), "noise_std": noise_std, "rotation_z": angle,
              "scale": factors.tolist(), "flip_x": flipped}
    return SphereSample(sample.center.copy(), sample.radius, sample.index.copy(), local + sample.center,
                        sample.semantic.copy(), sample.instance.copy(), record)


def export_spheres(samples, out_dir, seed=None, provenance=None, **augment_kwargs):
    """One PLY per sphere plus ``spheres.json``; augmented when ``seed`` is given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for k, sample in enumerate(samples):
        if seed is not None:
            sample = augment_sphere(sample, seed + k, **augment_kwargs)
        name = f"sphere_{k:05d}.ply"
        write_ply(out / name, sample.xyz, semantic=sample.semantic, instance=sample.instance)
        records.append({"file": name, "center": sample.center.tolist(), "radius": sample.radius,
                        "n_points": len(sample.index), "seed": None if seed is None else seed + k,
                        "augmentation": sample.augmentation})
    doc = {"spheres": records}
    if provenance is not None:
        doc["provenance"] = provenance
    (out / "spheres.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


class PseudoLabeler(TransformerMixin, BaseEstimator):
    """Fused instances -> pseudo-labeled target cloud.

    ``fit`` takes an :class:`InstanceSet`; ``transform`` takes the merged
    target cloud and returns it labeled, refined and instance-reset.
    """

    def __init__(self, d_p=0.003, refine=True, weighting="inverse_distance", allow_null_vote=True,
                 reset_fraction=0.8):
        self.d_p = d_p
        self.refine = refine
        self.weighting = weighting
        self.allow_null_vote = allow_null_vote
        self.reset_fraction = reset_fraction

    def fit(self, X, y=None):
        self.class_ids_ = {name: i + 1 for i, name in enumerate(X.class_names)}
        self.query_ = X.to_cloud(self.class_ids_)
        return self

    def transform(self, X):
        check_is_fitted(self, "query_")
        labeled = transfer_labels(X, self.query_, self.d_p)
        if self.refine:
            labeled = refine_majority_vote(labeled, self.d_p, self.weighting, self.allow_null_vote)
            labeled = instance_majority_reset(labeled, self.reset_fraction)
        return labeled
