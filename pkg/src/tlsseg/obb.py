"""Oriented bounding boxes and their exact intersection-over-union."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_points

BOX_EPS = 1e-3  # half-extent floor (m)

_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
# corner ids of the six faces, each wound counter-clockwise seen from outside
_FACES = (
    (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
    (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
    (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
)


@dataclass(frozen=True, eq=False)
class OBB:
    center: np.ndarray
    axes: np.ndarray  # columns are the box axes
    half_extents: np.ndarray

    @property
    def volume(self):
        return float(8.0 * np.prod(self.half_extents))

    def corners(self):
        return self.center + (_SIGNS * self.half_extents) @ self.axes.T

    def halfspaces(self):
        """(normals, offsets) with the box equal to {x : normals @ x <= offsets}."""
        normals = np.concatenate([self.axes.T, -self.axes.T])
        offsets = normals @ self.center + np.concatenate([self.half_extents, self.half_extents])
        return normals, offsets

    def contains(self, points, tol=1e-9):
        local = np.abs((np.asarray(points) - self.center) @ self.axes)
        return np.all(local <= self.half_extents + tol, axis=1)

    def transformed(self, rotation, translation):
        return OBB(rotation @ self.center + translation, rotation @ self.axes, self.half_extents.copy())

    def to_dict(self):
        return {"center": self.center.tolist(), "axes": self.axes.tolist(), "half_extents": self.half_extents.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], float), np.asarray(d["axes"], float), np.asarray(d["half_extents"], float))


def compute_obb(points, eps=BOX_EPS):
    """PCA-aligned box around ``points``; each half extent is at least ``eps``."""
    X = check_points(points, allow_empty=False)
    if len(X) == 1:
        return OBB(X[0].copy(), np.eye(3), np.full(3, eps))
    mean = X.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov(X.T, bias=True))
    axes = vecs[:, ::-1].copy()
    # deterministic signs: dominant component of every axis positive, right-handed frame
    dominant = axes[np.argmax(np.abs(axes), axis=0), np.arange(3)]
    axes *= np.where(dominant < 0, -1.0, 1.0)
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1
    proj = (X - mean) @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = mean + axes @ ((lo + hi) / 2)
    return OBB(center, axes, np.maximum((hi - lo) / 2, eps))


def _box_polytope(box):
    corners = box.corners()
    return [corners[list(face)] for face in _FACES]


def _clip(faces, normal, offset):
    """Cut a convex polytope (list of face polygons) with {x : normal @ x <= offset}."""
    eps = 1e-12 * (1.0 + abs(offset))
    out_faces, cap, on_plane_face = [], [], False
    for face in faces:
        dist = face @ normal - offset
        if np.all(dist <= eps):
            out_faces.append(face)
            if np.all(np.abs(dist) <= eps):
                on_plane_face = True
            cap.extend(face[np.abs(dist) <= eps])
            continue
        if np.all(dist >= -eps):
            cap.extend(face[np.abs(dist) <= eps])
            continue
        poly = []
        m = len(face)
        for i in range(m):
            p, q = face[i], face[(i + 1) % m]
            dp, dq = dist[i], dist[(i + 1) % m]
            if dp <= eps:
                poly.append(p)
                if dp >= -eps:
                    cap.append(p)
            if (dp < -eps and dq > eps) or (dp > eps and dq < -eps):
                x = p + (q - p) * (dp / (dp - dq))
                poly.append(x)
                cap.append(x)
        if len(poly) >= 3:
            out_faces.append(np.asarray(poly))
    if not out_faces:
        return []
    if not on_plane_face and len(cap) >= 3:
        pts = _unique_rows(np.asarray(cap))
        if len(pts) >= 3:
            centroid = pts.mean(axis=0)
            u = pts[np.argmax(np.linalg.norm(pts - centroid, axis=1))] - centroid
            if np.linalg.norm(u) > 0:
                u /= np.linalg.norm(u)
                v = np.cross(normal, u)
                rel = pts - centroid
                out_faces.append(pts[np.argsort(np.arctan2(rel @ v, rel @ u))])
    return out_faces


def _unique_rows(pts, tol=1e-12):
    scale = max(1.0, float(np.abs(pts).max()))
    keys = np.round(pts / (tol * 1e3 * scale)).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return pts[np.sort(idx)]


def _polytope_volume(faces):
    if not faces:
        return 0.0
    ref = np.mean([f.mean(axis=0) for f in faces], axis=0)
    vol = 0.0
    for f in faces:
        a = f[0] - ref
        b = f[1:-1] - ref
        c = f[2:] - ref
        vol += np.abs(np.einsum("j,ij->i", a, np.cross(b, c))).sum()
    return vol / 6.0


def intersection_volume(a, b):
    if np.linalg.norm(a.center - b.center) > np.linalg.norm(a.half_extents) + np.linalg.norm(b.half_extents):
        return 0.0
    faces = _box_polytope(a)
    normals, offsets = b.halfspaces()
    for n, d in zip(normals, offsets):
        faces = _clip(faces, n, d)
        if not faces:
            return 0.0
    return min(_polytope_volume(faces), a.volume, b.volume)


def obb_iou(a, b):
    """Exact IoU: box ``a`` clipped by the six half-spaces of box ``b``."""
    inter = intersection_volume(a, b)
    if inter <= 0:
        return 0.0
    return float(np.clip(inter / (a.volume + b.volume - inter), 0.0, 1.0))


def obb_iou_monte_carlo(a, b, n_samples=1_000_000, seed=0):
    """Rejection estimate of the IoU from uniform samples inside ``a``."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(n_samples, 3))
    pts = a.center + (u * a.half_extents) @ a.axes.T
    inter = b.contains(pts, tol=0.0).mean() * a.volume
    return float(inter / (a.volume + b.volume - inter))
