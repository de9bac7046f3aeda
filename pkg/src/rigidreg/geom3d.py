"""Core 3D geometry: point clouds, rigid transforms, exact kNN, rotations, chamfer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "plane", "gaussian_blobs")


@dataclass(frozen=True)
class PointCloud:
    """Ordered (N, 3) array of points with a cached centroid."""

    points: np.ndarray
    centroid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "centroid", pts.mean(axis=0))

    def __len__(self):
        return self.points.shape[0]


def as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    return pts


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def is_valid(self, tol: float = 1e-9) -> bool:
        ortho = np.abs(self.R.T @ self.R - np.eye(3)).max() <= tol
        return bool(ortho and abs(np.linalg.det(self.R) - 1.0) <= tol)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def to_dict(self) -> dict:
        return {"R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}


@dataclass(frozen=True)
class NeighborhoodIndex:
    k: int
    neighbors: np.ndarray


def centroid(cloud) -> np.ndarray:
    pts = as_points(cloud)
    if pts.shape[0] < 1:
        raise ValueError("centroid of an empty cloud is undefined")
    return pts.mean(axis=0)


def _lexsort_rows(sq, cand):
    # row-wise order by (distance, index): stable sort on index, then on distance
    by_idx = np.argsort(cand, axis=1, kind="stable")
    sq_b = np.take_along_axis(sq, by_idx, axis=1)
    by_sq = np.argsort(sq_b, axis=1, kind="stable")
    return np.take_along_axis(by_idx, by_sq, axis=1)


def knn_bruteforce(points, k: int, include_self: bool = False) -> np.ndarray:
    """Exact kNN in any dimension by full pairwise distances, ties to lower index."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    _check_k(n, k, include_self)
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    if not include_self:
        np.fill_diagonal(sq, np.inf)
    order = np.argsort(sq, axis=1, kind="stable")
    return order[:, :k]


def _check_k(n, k, include_self):
    limit = n if include_self else n - 1
    if not isinstance(k, (int, np.integer)) or k < 1 or k > limit:
        raise ValueError(f"k={k} out of range for N={n} (include_self={include_self})")


def knn(cloud, k: int, include_self: bool = False) -> NeighborhoodIndex:
    """Exact k nearest neighbours of every point, backed by a kd-tree.

    Rows are ordered by nondecreasing distance with ties broken by lower
    point index. The query point itself is excluded unless ``include_self``.
    """
    pts = as_points(cloud)
    n = pts.shape[0]
    _check_k(n, k, include_self)
    need = k if include_self else k + 1
    m = min(n, need + 4)
    tree = cKDTree(pts)
    _, cand = tree.query(pts, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, m)
    self_idx = None if include_self else np.arange(n)
    sq = ((pts[cand] - pts[:, None, :]) ** 2).sum(axis=-1)
    if self_idx is not None:
        sq = np.where(cand == self_idx[:, None], np.inf, sq)
    order = _lexsort_rows(sq, cand)
    cand = np.take_along_axis(cand, order, axis=1)
    sq = np.take_along_axis(sq, order, axis=1)
    out = cand[:, :k].copy()
    if m < n:
        # rows whose k-th distance reaches the last retrieved candidate may hide ties
        kth = sq[:, k - 1]
        last = np.where(np.isfinite(sq), sq, -np.inf).max(axis=1)
        risky = np.nonzero(kth >= last * (1.0 - 1e-12) - 1e-300)[0]
        for i in risky:
            r = np.sqrt(kth[i]) * (1.0 + 1e-9) + 1e-12
            ball = np.asarray(tree.query_ball_point(pts[i], r), dtype=np.int64)
            if not include_self:
                ball = ball[ball != i]
            d = ((pts[ball] - pts[i]) ** 2).sum(axis=-1)
            o = np.lexsort((ball, d))
            out[i] = ball[o][:k]
    return NeighborhoodIndex(k=k, neighbors=out)


def apply_transform(cloud, T: RigidTransform):
    pts = as_points(cloud)
    moved = pts @ T.R.T + T.t
    return PointCloud(moved) if isinstance(cloud, PointCloud) else moved


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(max_angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Random proper rotation with angle at most ``max_angle_deg``.

    At 180 degrees the draw is Haar-uniform over SO(3) (Shoemake's
    quaternion construction). Below that the axis is uniform on the sphere
    and the angle uniform in ``[0, max_angle_deg]``.
    """
    if not (0.0 < max_angle_deg <= 180.0):
        raise ValueError("max_angle_deg must lie in (0, 180]")
    if max_angle_deg >= 180.0:
        u1, u2, u3 = rng.random(3)
        q = np.array(
            [
                np.sqrt(u1) * np.cos(2 * np.pi * u3),
                np.sqrt(1 - u1) * np.sin(2 * np.pi * u2),
                np.sqrt(1 - u1) * np.cos(2 * np.pi * u2),
                np.sqrt(u1) * np.sin(2 * np.pi * u3),
            ]
        )
        return quaternion_to_matrix(q)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = np.deg2rad(max_angle_deg) * rng.random()
    return axis_angle_matrix(axis, angle)


def random_transform(max_angle_deg, max_translation, rng) -> RigidTransform:
    if max_angle_deg <= 0:
        R = np.eye(3)
    else:
        R = random_rotation(max_angle_deg, rng)
    t = rng.uniform(-max_translation, max_translation, size=3) if max_translation > 0 else np.zeros(3)
    return RigidTransform(R, t)


def rotation_angle_deg(R) -> float:
    # atan2 form keeps full precision near 0 and 180 degrees, unlike arccos of the trace
    R = np.asarray(R)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.degrees(np.arctan2(s, c)))


def rotation_error_deg(R_est, R_true) -> float:
    """Geodesic angle of the relative rotation, degrees."""
    return rotation_angle_deg(np.asarray(R_est).T @ np.asarray(R_true))


def euler_angles_deg(R) -> tuple[float, float, float]:
    """Intrinsic Z-Y-X (yaw, pitch, roll) angles in degrees.

    ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``. At gimbal lock (|pitch| = 90)
    roll is forced to 0 and the whole in-plane rotation goes to yaw.
    """
    R = np.asarray(R, dtype=np.float64)
    s = float(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = np.arcsin(s)
    if abs(s) > 1.0 - 1e-12:
        roll = 0.0
        yaw = np.arctan2(-R[0, 1], R[1, 1])
    else:
        yaw = np.arctan2(R[1, 0], R[0, 0])
        roll = np.arctan2(R[2, 1], R[2, 2])
    return float(np.degrees(yaw)), float(np.degrees(pitch)), float(np.degrees(roll))


def matrix_from_euler_deg(yaw, pitch, roll) -> np.ndarray:
    y, p, r = np.deg2rad([yaw, pitch, roll])
    Rz = np.array([[np.cos(y), -np.sin(y), 0], [np.sin(y), np.cos(y), 0], [0, 0, 1]])
    Ry = np.array([[np.cos(p), 0, np.sin(p)], [0, 1, 0], [-np.sin(p), 0, np.cos(p)]])
    Rx = np.array([[1, 0, 0], [0, np.cos(r), -np.sin(r)], [0, np.sin(r), np.cos(r)]])
    return Rz @ Ry @ Rx


def chamfer(a, b, tree_b: cKDTree | None = None) -> float:
    """Symmetric chamfer: mean squared NN distance a->b plus b->a."""
    pa, pb = as_points(a), as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer needs nonempty clouds")
    tb = tree_b if tree_b is not None else cKDTree(pb)
    da, _ = tb.query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    return float(np.mean(da**2) + np.mean(db**2))


def add_gaussian_noise(cloud, sigma: float, rng: np.random.Generator):
    """Perturb every coordinate with N(0, sigma^2); no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    pts = as_points(cloud)
    noisy = pts + sigma * rng.standard_normal(pts.shape)
    return PointCloud(noisy) if isinstance(cloud, PointCloud) else noisy


def _sample_box_surface(rng, n, half):
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 2
    face = rng.choice(6, size=n, p=np.repeat(areas, 2) / np.repeat(areas, 2).sum())
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    ax = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), ax] = sign * half[ax]
    return pts


def _sample_plane(rng, n):
    # airplane-like body; every part is invariant under a 180 deg turn about x
    parts = [
        ("fuselage", 3.0),
        ("wing", 2.0),
        ("tail", 0.8),
        ("fins", 0.6),
    ]
    weights = np.array([w for _, w in parts])
    which = rng.choice(len(parts), size=n, p=weights / weights.sum())
    out = np.empty((n, 3))
    for j, (name, _) in enumerate(parts):
        idx = np.nonzero(which == j)[0]
        m = len(idx)
        if name == "fuselage":
            x = rng.uniform(-1.5, 1.5, m)
            th = rng.uniform(0, 2 * np.pi, m)
            rad = 0.25 * np.sqrt(np.clip(1 - (x / 1.6) ** 2, 0.05, None))
            out[idx] = np.c_[x, rad * np.cos(th), rad * np.sin(th)]
        elif name == "wing":
            y = rng.uniform(-1.4, 1.4, m)
            chord = 0.5 - 0.2 * np.abs(y) / 1.4
            x = 0.2 - 0.3 * np.abs(y) / 1.4 + rng.uniform(-0.5, 0.5, m) * chord
            out[idx] = np.c_[x, y, np.zeros(m)]
        elif name == "tail":
            y = rng.uniform(-0.5, 0.5, m)
            x = -1.3 + rng.uniform(-0.15, 0.15, m)
            out[idx] = np.c_[x, y, np.zeros(m)]
        else:
            z = rng.uniform(0.2, 0.6, m) * rng.choice([-1.0, 1.0], m)
            x = -1.3 + rng.uniform(-0.15, 0.15, m) - 0.3 * (np.abs(z) - 0.2)
            out[idx] = np.c_[x, np.zeros(m), z]
    return out


def generate_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample ``n`` points on a named synthetic surface, deterministic per seed.

    Shape proportions are jittered per seed (except the unit sphere) so that a
    batch of seeds gives a varied dataset. ``plane`` is symmetric under a
    180 degree rotation about the x axis.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; choose from {SHAPE_KINDS}")
    if n < 8:
        raise ValueError("n must be at least 8")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        pts = v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "cube":
        half = rng.uniform(0.4, 1.0, size=3)
        pts = _sample_box_surface(rng, n, half)
    elif kind == "cylinder":
        r, h = rng.uniform(0.3, 0.7), rng.uniform(0.8, 1.6)
        side, cap = 2 * np.pi * r * 2 * h, 2 * np.pi * r * r
        on_side = rng.random(n) < side / (side + cap)
        th = rng.uniform(0, 2 * np.pi, n)
        z = np.where(on_side, rng.uniform(-h, h, n), np.where(rng.random(n) < 0.5, -h, h))
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        pts = np.c_[rad * np.cos(th), rad * np.sin(th), z]
    elif kind == "torus":
        R, r = rng.uniform(0.7, 1.0), rng.uniform(0.15, 0.35)
        # rejection on the tube angle for area-uniform sampling
        u = rng.uniform(0, 2 * np.pi, 4 * n)
        v = rng.uniform(0, 2 * np.pi, 4 * n)
        keep = rng.random(4 * n) < (R + r * np.cos(v)) / (R + r)
        u, v = u[keep][:n], v[keep][:n]
        pts = np.c_[(R + r * np.cos(v)) * np.cos(u), (R + r * np.cos(v)) * np.sin(u), r * np.sin(v)]
    elif kind == "plane":
        pts = _sample_plane(rng, n)
    else:
        n_blobs = int(rng.integers(3, 6))
        centers = rng.uniform(-0.8, 0.8, size=(n_blobs, 3))
        scales = rng.uniform(0.08, 0.3, size=(n_blobs, 3))
        which = rng.integers(0, n_blobs, size=n)
        pts = centers[which] + scales[which] * rng.standard_normal((n, 3))
    return PointCloud(pts)


def center(cloud) -> PointCloud:
    pts = as_points(cloud)
    return PointCloud(pts - pts.mean(axis=0))
