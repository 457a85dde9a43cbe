"""Point-cloud containers, rigid transforms, spatial queries, and ICP.

Everything here operates on plain float64 numpy arrays. Clouds live in
meters; transforms are stored as an explicit rotation matrix plus a
translation vector so that applying them to points is literal matrix
arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

ORTHONORMALITY_TOL = 1e-9


class DegenerateGeometryError(RuntimeError):
    """Raised when a rigid fit sees correspondences with rank < 2 spread."""


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


@dataclass
class PointCloud:
    """An ordered set of 3D points with the sensor position that produced it.

    Args:
        points: (n, 3) array-like, meters.
        sensor_origin: position of the sensor in the cloud's own frame,
            meters. Defaults to the origin.
    """

    points: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = _as_points(self.points)
        self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.sensor_origin)):
            raise ValueError("sensor origin must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RigidTransform:
    """An SE(3) element: x -> R @ x + t.

    The rotation must be orthonormal with determinant +1 within 1e-9; the
    constructor enforces this so downstream math never has to re-check.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.rotation)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("transform entries must be finite")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant {det} is not +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_flat(cls, values) -> "RigidTransform":
        """Builds from 12 numbers: row-major rotation followed by translation."""
        v = np.asarray(values, dtype=np.float64).reshape(12)
        return cls(v[:9].reshape(3, 3), v[9:])

    def to_flat(self) -> np.ndarray:
        """Row-major rotation then translation, 12 numbers."""
        return np.concatenate([self.rotation.reshape(9), self.translation])

    def apply(self, points) -> np.ndarray:
        """Applies the transform to one point or an (n, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns the transform equivalent to applying `other` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def rotation_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_yaw_roll_pitch(yaw: float, roll: float, pitch: float) -> np.ndarray:
    """Composes per-axis rotations as Rz(yaw) @ Rx(roll) @ Ry(pitch), radians."""
    return rotation_z(yaw) @ rotation_x(roll) @ rotation_y(pitch)


@dataclass
class RegisteredPair:
    """A source/reference cloud pair with estimated and true transforms.

    `label` is the mean distance between the source mapped by the estimated
    transform and the source mapped by the true transform. The constructor
    recomputes it from the other fields and rejects labels that disagree by
    more than 1e-9, so a loaded pair is guaranteed self-consistent.
    """

    source: PointCloud
    reference: PointCloud
    estimated: RigidTransform
    ground_truth: RigidTransform
    label: float

    def __post_init__(self):
        self.label = float(self.label)
        if self.label < 0:
            raise ValueError("label must be nonnegative")
        recomputed = transform_discrepancy(self.source.points, self.estimated, self.ground_truth)
        if abs(recomputed - self.label) > 1e-9:
            raise ValueError(
                f"stored label {self.label} disagrees with recomputed value {recomputed}"
            )


def transform_discrepancy(
    points: np.ndarray, estimated: RigidTransform, ground_truth: RigidTransform
) -> float:
    """Mean per-point distance between two transforms applied to `points`."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise ValueError("empty point cloud")
    delta = estimated.apply(pts) - ground_truth.apply(pts)
    return float(np.mean(np.linalg.norm(delta, axis=1)))


def alignment_error(pair: RegisteredPair) -> float:
    """Mean distance between estimated and true placements of the source.

    Returns:
        (1/n) * sum_p ||T_est(p) - T_true(p)||, meters. Always >= 0. For a
        pure-translation discrepancy this equals the translation norm exactly.
    """
    return transform_discrepancy(pair.source.points, pair.estimated, pair.ground_truth)


class SpatialIndex:
    """Immutable kd-tree over a point array for exact closed-ball queries."""

    def __init__(self, points):
        self._points = _as_points(points)
        # cKDTree rejects empty input; an empty index still answers queries.
        self._tree = cKDTree(self._points) if len(self._points) else None

    @property
    def points(self) -> np.ndarray:
        return self._points

    def radius_query(self, center, radius: float) -> np.ndarray:
        """Indices of points with ||p - center|| <= radius, ascending order."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        return np.sort(np.asarray(idx, dtype=np.intp))

    def radius_query_many(self, centers, radius: float) -> list[np.ndarray]:
        """Batched radius_query; one sorted index array per center."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        centers = np.asarray(centers, dtype=np.float64)
        if self._tree is None:
            return [np.empty(0, dtype=np.intp) for _ in range(len(centers))]
        lists = self._tree.query_ball_point(centers, radius)
        return [np.sort(np.asarray(ix, dtype=np.intp)) for ix in lists]

    def nearest(self, queries, k: int = 1):
        """Distances and indices of the k nearest points to each query."""
        if self._tree is None:
            raise ValueError("index over an empty cloud has no neighbors")
        return self._tree.query(np.asarray(queries, dtype=np.float64), k=k)


def farthest_point_sampling(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subsampling of a point array.

    The first selected index is `start_index`; each following pick maximizes
    the minimum distance to everything already selected, breaking ties by the
    lowest index so the output is fully deterministic.

    Args:
        points: (n, 3) array.
        k: number of samples, 1 <= k <= n.
        start_index: index of the seed point.

    Returns:
        (k,) array of selected indices.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for cloud of {n} points")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index={start_index} out of range")
    selected = np.empty(k, dtype=np.intp)
    selected[0] = start_index
    min_dist = np.linalg.norm(pts - pts[start_index], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))  # argmax takes the first max: lowest index wins ties
        selected[i] = nxt
        np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1), out=min_dist)
    return selected


def fit_rigid(source_points: np.ndarray, target_points: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping source points onto target points.

    Closed-form SVD solution on known correspondences (row i of source pairs
    with row i of target). Uses the maximum-likelihood covariance (divide by
    n) and repairs reflections by flipping the smallest singular direction.

    Raises:
        DegenerateGeometryError: correspondence covariance has rank < 2
            (points effectively collinear), so the rotation is not determined.
    """
    src = _as_points(source_points)
    dst = _as_points(target_points)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError("need >= 3 corresponding points of equal count")
    centroid_src = src.mean(axis=0)
    centroid_dst = dst.mean(axis=0)
    cov = (src - centroid_src).T @ (dst - centroid_dst) / src.shape[0]
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-12:
        raise DegenerateGeometryError("degenerate geometry")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_dst - rotation @ centroid_src
    return RigidTransform(rotation, translation)


def icp_register(
    source: PointCloud,
    reference: PointCloud,
    init: RigidTransform | None = None,
    max_iters: int = 50,
    tol: float = 1e-6,
    history: list | None = None,
) -> RigidTransform:
    """Point-to-point ICP from an initial guess.

    Alternates nearest-neighbor correspondence against the reference with a
    closed-form rigid refit of the original source, stopping when the
    closest-point residual improves by less than `tol` meters or `max_iters`
    is hit. The residual is the root-mean-square nearest-neighbor distance:
    both the refit and the re-matching step can only lower it, so the
    recorded residual sequence is non-increasing by construction. No
    correspondence rejection: clouds are assumed clean.

    Args:
        source: cloud to move.
        reference: fixed cloud.
        init: starting transform (identity if omitted).
        max_iters: iteration cap.
        tol: minimum residual improvement to keep iterating, meters.
        history: optional list; the residual is appended each iteration.

    Returns:
        The accumulated source-to-reference transform.
    """
    if len(source) < 3 or len(reference) < 3:
        raise ValueError("both clouds need >= 3 points")
    transform = init if init is not None else RigidTransform.identity()
    ref_index = SpatialIndex(reference.points)
    prev_residual = np.inf
    for _ in range(max_iters):
        moved = transform.apply(source.points)
        dist, nn = ref_index.nearest(moved)
        residual = float(np.sqrt(np.mean(dist**2)))
        if history is not None:
            history.append(residual)
        if prev_residual - residual < tol:
            break
        prev_residual = residual
        transform = fit_rigid(source.points, reference.points[nn])
    return transform


def voxel_downsample(cloud: PointCloud, voxel_size: float = 0.5) -> PointCloud:
    """One centroid per occupied voxel, ordered by voxel grid coordinates."""
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.empty((0, 3)), cloud.sensor_origin)
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(np.float64)
    return PointCloud(sums / counts[:, None], cloud.sensor_origin)


def write_xyz(path, cloud: PointCloud) -> None:
    """Writes one `x y z` line per point with 9 significant digits."""
    with open(path, "w") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path, sensor_origin=None) -> PointCloud:
    """Reads an ASCII XYZ file; `#` starts a comment, blank lines are skipped."""
    rows = []
    with open(path) as fh:
        for line in fh:
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 3:
                raise ValueError(f"malformed XYZ line: {line.rstrip()}")
            rows.append([float(p) for p in parts])
    pts = np.asarray(rows, dtype=np.float64) if rows else np.empty((0, 3))
    origin = np.zeros(3) if sensor_origin is None else sensor_origin
    return PointCloud(pts, origin)


def quantize_to_xyz_precision(points: np.ndarray) -> np.ndarray:
    """Rounds coordinates through the 9-significant-digit XYZ text format.

    Clouds destined for disk are passed through this before any label is
    computed, so labels recompute exactly from the stored files.
    """
    pts = _as_points(points)
    flat = np.array([float(f"{v:.9g}") for v in pts.ravel()])
    return flat.reshape(pts.shape)
