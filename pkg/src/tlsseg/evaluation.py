"""Instance evaluation against sparse point references.

Each reference is a single 3D point placed on one object. A predicted
instance and a reference are matchable when the closest instance point lies
within ``d_tau`` of the reference; one-to-one matches come from a linear
assignment over the gated distance matrix.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from ._validation import FormatError, check_points, check_positive, check_unit_interval
from .instances import InstanceSet
from .obb import obb_iou

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ReferenceSet:
    xyz: np.ndarray
    ids: list = None

    def __post_init__(self):
        self.xyz = check_points(self.xyz, name="reference points")
        if self.ids is None:
            self.ids = list(range(len(self.xyz)))
        if len(self.ids) != len(self.xyz) or len(set(self.ids)) != len(self.ids):
            raise FormatError("reference ids must be unique, one per point")

    def __len__(self):
        return len(self.xyz)


def load_references(path):
    """``refs.json`` (``[{"id", "xyz": [3]}]``) or a whitespace 3-column text file."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        try:
            return ReferenceSet([r["xyz"] for r in doc], [r["id"] for r in doc])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: reference entries need 'id' and 'xyz'") from exc
    data = np.loadtxt(path, ndmin=2)
    if data.size and data.shape[1] != 3:
        raise FormatError(f"{path}: expected 3 columns, got {data.shape[1]}")
    return ReferenceSet(data.reshape(-1, 3))


def save_references(refs, path):
    doc = [{"id": i, "xyz": p.tolist()} for i, p in zip(refs.ids, refs.xyz)]
    Path(path).write_text(json.dumps(doc, indent=1))


def distance_matrix(instances, refs):
    """D[j, k] = distance from reference j to the closest point of instance k."""
    D = np.full((len(refs), len(instances)), np.inf)
    if len(refs) == 0:
        return D
    for k, inst in enumerate(instances):
        D[:, k], _ = cKDTree(inst.xyz).query(refs.xyz, k=1)
    return D


@dataclass
class MatchResult:
    pairs: list  # (instance k, reference j, distance)
    unmatched_predictions: list
    unmatched_references: list
    n_predictions: int
    n_references: int

    @property
    def total_distance(self):
        return float(sum(d for _, _, d in self.pairs))


def match_distance_matrix(D, d_tau):
    """Maximum one-to-one matching under the gate, with minimum total distance.

    Forbidden entries receive a sentinel larger than any feasible total, so the
    assignment first maximises the number of allowed pairs.
    """
    D = np.asarray(D, dtype=np.float64)
    n_ref, n_pred = D.shape
    pairs = []
    if n_ref and n_pred:
        allowed = D <= d_tau
        sentinel = d_tau * (min(n_ref, n_pred) + 1) + 1.0
        cost = np.where(allowed, D, sentinel)
        rows, cols = linear_sum_assignment(cost)
        pairs = sorted((int(k), int(j), float(D[j, k])) for j, k in zip(rows, cols) if allowed[j, k])
    matched_k = {k for k, _, _ in pairs}
    matched_j = {j for _, j, _ in pairs}
    return MatchResult(
        pairs,
        [k for k in range(n_pred) if k not in matched_k],
        [j for j in range(n_ref) if j not in matched_j],
        n_pred, n_ref,
    )


def match_instances(instances, refs, d_tau=0.030):
    d_tau = check_positive(d_tau, "d_tau")
    return match_distance_matrix(distance_matrix(instances, refs), d_tau)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ce: int
    rce: float
    usr: float | None = None
    pairs: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_counts(cls, tp, fp, fn, usr=None):
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        ce = (tp + fp) - (tp + fn)
        rce = ce / (tp + fn) if tp + fn else 0.0
        return cls(tp, fp, fn, precision, recall, f1, ce, rce, usr)


def compute_metrics(match, usr=None):
    tp = len(match.pairs)
    report = EvalReport.from_counts(tp, match.n_predictions - tp, match.n_references - tp, usr)
    report.pairs = [list(p) for p in match.pairs]
    return report


def compute_usr(instances, refs, d_tau_strict=0.010):
    """Percentage of instances that have two or more references within ``d_tau_strict``."""
    d_tau_strict = check_positive(d_tau_strict, "d_tau_strict")
    if len(instances) == 0:
        logger.warning("USR of an empty prediction set is reported as 0")
        return 0.0
    D = distance_matrix(instances, refs)
    under = ((D <= d_tau_strict).sum(axis=0) >= 2).sum()
    return 100.0 * under / len(instances)


def evaluate(instances, refs, d_tau=0.030, d_tau_strict=0.010):
    report = compute_metrics(match_instances(instances, refs, d_tau), compute_usr(instances, refs, d_tau_strict))
    return report


def merge_predictions_nms(a, b, iou_threshold=0.1, score="points"):
    """Greedy box NMS over the pooled predictions of two instance sets.

    Instances are ranked by point count (or ``support_count``) and kept when
    their IoU with every kept instance stays below ``iou_threshold``.
    Kept instances are renumbered in rank order.
    """
    iou_threshold = check_unit_interval(iou_threshold, "iou_threshold")
    pool = list(a) + list(b)
    if score == "points":
        keys = [len(inst) for inst in pool]
    elif score == "support":
        keys = [inst.support_count for inst in pool]
    else:
        raise ValueError(f"unknown NMS score {score!r}")
    order = sorted(range(len(pool)), key=lambda i: -keys[i])
    kept = []
    for i in order:
        if all(obb_iou(pool[i].obb, pool[j].obb) < iou_threshold for j in kept):
            kept.append(i)
    out = []
    for new_id, i in enumerate(kept):
        inst = pool[i]
        out.append(type(inst)(new_id, inst.class_label, inst.xyz, inst.support_count, inst.score, inst.obb))
    return InstanceSet(out)


def render_table(reports):
    """Plain-text table with one column per named report."""
    names = list(reports)
    rows = [("TP", "tp", "{:d}"), ("FP", "fp", "{:d}"), ("FN", "fn", "{:d}"), ("P", "precision", "{:.2f}"),
            ("R", "recall", "{:.2f}"), ("F1", "f1", "{:.2f}"), ("CE", "ce", "{:d}"), ("RCE", "rce", "{:.2f}")]
    if any(r.usr is not None for r in reports.values()):
        rows.append(("USR", "usr", "{:.1f}"))
    width = max(8, *(len(n) + 2 for n in names))
    lines = ["Metric".ljust(8) + "".join(n.rjust(width) for n in names)]
    for label, attr, fmt in rows:
        cells = []
        for n in names:
            v = getattr(reports[n], attr)
            cells.append(("-" if v is None else fmt.format(v)).rjust(width))
        lines.append(label.ljust(8) + "".join(cells))
    return "\n".join(lines)
