"""Per-anchor multiscale geometric features for a registered cloud pair.

For each anchor and each neighborhood radius r_s the extractor computes the
differential entropy of the joint and separate neighborhoods, a debiased
entropic optimal-transport divergence between the source-side and
reference-side neighborhoods, and two coverage ratios; three global entries
(co-visibility, sensor distance, source flag) complete the 5S+3 vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import cKDTree, ConvexHull, QhullError
from scipy.spatial.distance import cdist

from .geometry import PointCloud, RegisteredPair, SpatialIndex, farthest_point_sampling

LOG_2PI_E = float(np.log(2.0 * np.pi * np.e))


@dataclass
class ScaleConfig:
    """Neighborhood scales and transport-solver settings.

    `radii` must be strictly decreasing. `sinkhorn_lambda` is the entropic
    regularization weight applied to radius-normalized squared distances
    during extraction (costs are divided by r_s^2 per scale, so one lambda
    behaves consistently across scales); the standalone divergence operates
    on raw squared distances with the same lambda.
    """

    radii: tuple = (7.5, 4.0, 2.5)
    sinkhorn_lambda: float = 0.2
    sinkhorn_max_iters: int = 200
    sinkhorn_tol: float = 1e-6
    max_neighborhood_points: int = 48
    entropy_default: float = -10.0
    sinkhorn_default: float = 0.0

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        if len(self.radii) < 1:
            raise ValueError("need at least one radius")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if any(a <= b for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be strictly decreasing")
        if self.sinkhorn_lambda <= 0 or self.sinkhorn_tol <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.sinkhorn_max_iters < 1 or self.max_neighborhood_points < 1:
            raise ValueError("iteration and size caps must be >= 1")

    @property
    def n_scales(self) -> int:
        return len(self.radii)

    @property
    def feature_dim(self) -> int:
        return 5 * len(self.radii) + 3

    def to_dict(self) -> dict:
        return {
            "radii": list(self.radii),
            "sinkhorn_lambda": self.sinkhorn_lambda,
            "sinkhorn_max_iters": self.sinkhorn_max_iters,
            "sinkhorn_tol": self.sinkhorn_tol,
            "max_neighborhood_points": self.max_neighborhood_points,
            "entropy_default": self.entropy_default,
            "sinkhorn_default": self.sinkhorn_default,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScaleConfig":
        return cls(
            radii=tuple(d["radii"]),
            sinkhorn_lambda=d["sinkhorn_lambda"],
            sinkhorn_max_iters=d["sinkhorn_max_iters"],
            sinkhorn_tol=d["sinkhorn_tol"],
            max_neighborhood_points=d["max_neighborhood_points"],
            entropy_default=d["entropy_default"],
            sinkhorn_default=d["sinkhorn_default"],
        )


@dataclass
class AnchorFeatureVector:
    """Feature bundle for one anchor.

    `per_scale` is (S, 5) holding [H_joint, H_sep, D_lambda, rho_joint,
    rho_sep] per radius; `global_features` is [c, d, b].
    """

    per_scale: np.ndarray
    global_features: np.ndarray
    anchor_position: np.ndarray
    anchor_source: bool

    @property
    def vector(self) -> np.ndarray:
        """The flat 5S+3 feature vector: scale blocks then globals."""
        return np.concatenate([self.per_scale.ravel(), self.global_features])

    def block(self, s: int) -> np.ndarray:
        """The 8-entry key/value block for scale s: its 5 features + globals."""
        return np.concatenate([self.per_scale[s], self.global_features])


def differential_entropy(points, entropy_default: float = -10.0) -> float:
    """Entropy of a Gaussian fitted to a neighborhood.

    Uses the maximum-likelihood covariance (divide by n). Neighborhoods with
    fewer than 4 points or with covariance determinant <= 1e-12 (planar or
    thinner) return `entropy_default` instead, so the value is always finite.

    Returns:
        0.5 * ln((2*pi*e)^3 * det(cov)), or the default sentinel.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0 or pts.shape[0] < 4:
        return float(entropy_default)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    det = float(np.linalg.det(cov))
    if det <= 1e-12:
        return float(entropy_default)
    return 1.5 * LOG_2PI_E + 0.5 * float(np.log(det))


@njit(cache=True)
def _lse_rows(M, v, out):
    n, m = M.shape
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            t = M[i, j] + v[j]
            if t > mx:
                mx = t
        s = 0.0
        for j in range(m):
            s += np.exp(M[i, j] + v[j] - mx)
        out[i] = np.log(s) + mx


@njit(cache=True)
def _lse_cols(M, u, out):
    n, m = M.shape
    for j in range(m):
        mx = -np.inf
        for i in range(n):
            t = M[i, j] + u[i]
            if t > mx:
                mx = t
        s = 0.0
        for i in range(n):
            s += np.exp(M[i, j] + u[i] - mx)
        out[j] = np.log(s) + mx


@njit(cache=True)
def _entropic_transport_cost(C, lam, tol, max_iters):
    """Entropic OT cost between uniform marginals for a dense cost matrix.

    Log-domain Gauss-Seidel iterations on the dual potentials; stops when the
    L1 row-marginal violation drops below tol. Returns the transport objective
    sum(P*C) + lam*sum(P*log P) evaluated at the final plan.
    """
    n, m = C.shape
    loga = -np.log(n)
    a = 1.0 / n
    logb = -np.log(m)
    M = -C / lam
    u = np.full(n, loga)
    v = np.zeros(m)
    lse_r = np.empty(n)
    lse_c = np.empty(m)
    for _ in range(max_iters):
        _lse_rows(M, v, lse_r)
        viol = 0.0
        for i in range(n):
            viol += abs(np.exp(u[i] + lse_r[i]) - a)
        if viol < tol:
            break
        for i in range(n):
            u[i] = loga - lse_r[i]
        _lse_cols(M, u, lse_c)
        for j in range(m):
            v[j] = logb - lse_c[j]
    w = 0.0
    for i in range(n):
        for j in range(m):
            lp = M[i, j] + u[i] + v[j]
            p = np.exp(lp)
            if p > 0.0:
                w += p * (C[i, j] + lam * lp)
    return w


def entropic_transport_cost(A, B, cfg: ScaleConfig) -> float:
    """Entropic OT cost between two point sets under uniform marginals."""
    A = np.ascontiguousarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.ascontiguousarray(B, dtype=np.float64).reshape(-1, 3)
    C = cdist(A, B, "sqeuclidean")
    return float(
        _entropic_transport_cost(C, cfg.sinkhorn_lambda, cfg.sinkhorn_tol, cfg.sinkhorn_max_iters)
    )


def sinkhorn_divergence(A, B, cfg: ScaleConfig) -> float:
    """Debiased entropic transport divergence between two point sets.

    D(A,B) = W(A,B) - (W(A,A) + W(B,B)) / 2 with squared-Euclidean costs and
    uniform marginals. Empty inputs return cfg.sinkhorn_default. Inputs are
    put in a canonical order before solving, so D(A,B) and D(B,A) run the
    identical computation and agree bitwise. Negative results are numerical
    error (the debiased divergence is nonnegative at convergence) and are
    clamped to 0.
    """
    A = np.ascontiguousarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.ascontiguousarray(B, dtype=np.float64).reshape(-1, 3)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return float(cfg.sinkhorn_default)
    key_a = (A.shape[0], A.tobytes())
    key_b = (B.shape[0], B.tobytes())
    if key_a == key_b:
        return 0.0
    if key_b < key_a:
        A, B = B, A
    w_ab = entropic_transport_cost(A, B, cfg)
    w_aa = entropic_transport_cost(A, A, cfg)
    w_bb = entropic_transport_cost(B, B, cfg)
    d = w_ab - 0.5 * (w_aa + w_bb)
    return max(d, 0.0)


def _scaled_divergence(A, B, radius: float, cfg: ScaleConfig) -> float:
    """Divergence with costs normalized by radius^2 (coordinates by radius)."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 3)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 3)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return float(cfg.sinkhorn_default)
    return sinkhorn_divergence(A / radius, B / radius, cfg)


def coverage_ratios(
    n_joint: int, n_sep: int, n_source_total: int, n_reference_total: int, anchor_in_reference: bool
) -> tuple[float, float]:
    """Fractions of the clouds captured by a neighborhood.

    rho_joint counts the joint neighborhood against all points of both
    clouds; rho_sep counts the anchor's own-cloud neighborhood against that
    cloud alone, with the denominator picked by the anchor's source flag.
    """
    if n_source_total < 1 or n_reference_total < 1:
        raise ValueError("both clouds must be non-empty")
    rho_joint = n_joint / (n_source_total + n_reference_total)
    own_total = n_reference_total if anchor_in_reference else n_source_total
    rho_sep = n_sep / own_total
    return float(rho_joint), float(rho_sep)


def hidden_point_visibility(points: np.ndarray, origin, flip_radius: float | None = None) -> np.ndarray:
    """Which points are visible from a viewpoint, by spherical flipping.

    Each point is reflected about the sphere of radius `flip_radius` centered
    on the viewpoint; points whose reflections land on the convex hull of the
    flipped set plus the viewpoint are visible. The default flip radius is
    20x the maximum point range from the viewpoint, a rigid-invariant scale:
    much larger factors make the hull facets sag more than typical surface
    depth gaps, which stops occlusion from registering at all on meter-spaced
    synthetic clouds.

    Returns:
        (n,) boolean array. All-at-the-viewpoint degenerate input yields all
        False; inputs whose flipped set is too flat to hull yield all True
        (an unoccluded plane seen from off-plane).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    q = pts - origin
    norms = np.linalg.norm(q, axis=1)
    if flip_radius is None:
        max_range = float(norms.max()) if n else 0.0
        if max_range <= 1e-12:
            return np.zeros(n, dtype=bool)
        flip_radius = 20.0 * max_range
    visible = np.zeros(n, dtype=bool)
    at_origin = norms <= 1e-12
    visible[at_origin] = True  # coincident with the viewpoint: nothing occludes
    keep = ~at_origin
    if keep.sum() < 4:
        visible[keep] = True
        return visible
    qk = q[keep]
    nk = norms[keep]
    flipped = qk * (2.0 * flip_radius / nk - 1.0)[:, None]
    hull_input = np.vstack([flipped, np.zeros(3)])
    try:
        hull = ConvexHull(hull_input)
    except QhullError:
        visible[keep] = True
        return visible
    on_hull = np.zeros(hull_input.shape[0], dtype=bool)
    on_hull[hull.vertices] = True
    # vertex membership alone is not stable for flipped points that are nearly
    # coplanar with a facet: classify non-vertices by signed distance to the
    # hull surface instead, with a tolerance scaled to the flip radius
    tol = 1e-5 * flip_radius
    near = ~on_hull[:-1]
    if near.any():
        planes = hull.equations  # outward normals: inside means A @ x + b <= 0
        rest = flipped[near]
        margins = np.empty(rest.shape[0])
        for lo in range(0, rest.shape[0], 256):
            chunk = rest[lo : lo + 256]
            margins[lo : lo + 256] = (chunk @ planes[:, :3].T + planes[:, 3]).max(axis=1)
        on_hull[np.flatnonzero(near)] = margins >= -tol
    visible[np.flatnonzero(keep)] = on_hull[:-1]
    return visible


def covisibility_scores(
    joint_points: np.ndarray, origin_source, origin_reference, smooth_k: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point co-visibility over a combined cloud.

    The raw score is the fraction of the two sensor viewpoints from which a
    point is visible (0, 0.5, or 1). The smoothed score averages the raw
    scores over each point's `smooth_k` nearest neighbors (self included).

    Returns:
        (smoothed, raw) arrays, both in [0, 1].
    """
    pts = np.asarray(joint_points, dtype=np.float64).reshape(-1, 3)
    vis_a = hidden_point_visibility(pts, origin_source)
    vis_b = hidden_point_visibility(pts, origin_reference)
    raw = 0.5 * (vis_a.astype(np.float64) + vis_b.astype(np.float64))
    n = pts.shape[0]
    k = min(smooth_k, n)
    if k <= 1:
        return raw.copy(), raw
    _, nn = cKDTree(pts).query(pts, k=k)
    smoothed = raw[nn].mean(axis=1)
    return smoothed, raw


def covisibility_score(anchor, source: PointCloud, reference: PointCloud, smooth_k: int = 8) -> float:
    """Smoothed co-visibility of the joint-cloud point nearest to `anchor`.

    Both clouds must already sit in a common frame and have >= 4 points.
    """
    if len(source) < 4 or len(reference) < 4:
        raise ValueError("both clouds need >= 4 points")
    joint = np.vstack([source.points, reference.points])
    smoothed, _ = covisibility_scores(joint, source.sensor_origin, reference.sensor_origin, smooth_k)
    idx = int(np.argmin(np.linalg.norm(joint - np.asarray(anchor, dtype=np.float64), axis=1)))
    return float(smoothed[idx])


class _PairState:
    """Shared per-pair extraction state: aligned clouds, trees, co-visibility."""

    def __init__(self, pair: RegisteredPair, cfg: ScaleConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        self.source_aligned = pair.estimated.apply(pair.source.points)
        self.reference = pair.reference.points
        self.n_source = len(pair.source)
        self.n_reference = len(pair.reference)
        self.source_origin_own = pair.source.sensor_origin
        self.reference_origin_own = pair.reference.sensor_origin
        self.source_points_own = pair.source.points
        self.reference_points_own = pair.reference.points
        self.tree_source = SpatialIndex(self.source_aligned)
        self.tree_reference = SpatialIndex(self.reference)
        joint = np.vstack([self.source_aligned, self.reference])
        origin_source_aligned = pair.estimated.apply(pair.source.sensor_origin)
        self.covis, _ = covisibility_scores(joint, origin_source_aligned, pair.reference.sensor_origin)


def _subsample(points: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if points.shape[0] <= cap:
        return points
    idx = rng.choice(points.shape[0], size=cap, replace=False)
    return points[np.sort(idx)]


def _extract_one(state: _PairState, anchor_index: int, in_reference: bool) -> AnchorFeatureVector:
    cfg = state.cfg
    ordinal = anchor_index + (state.n_source if in_reference else 0)
    rng = np.random.default_rng(np.random.SeedSequence((state.seed, ordinal)))
    if in_reference:
        position = state.reference[anchor_index]
        own_point = state.reference_points_own[anchor_index]
        own_origin = state.reference_origin_own
    else:
        position = state.source_aligned[anchor_index]
        own_point = state.source_points_own[anchor_index]
        own_origin = state.source_origin_own
    per_scale = np.empty((cfg.n_scales, 5))
    for s, radius in enumerate(cfg.radii):
        idx_src = state.tree_source.radius_query(position, radius)
        idx_ref = state.tree_reference.radius_query(position, radius)
        pts_src = state.source_aligned[idx_src]
        pts_ref = state.reference[idx_ref]
        n_src, n_ref = len(idx_src), len(idx_ref)
        n_sep = n_ref if in_reference else n_src
        rho_joint, rho_sep = coverage_ratios(
            n_src + n_ref, n_sep, state.n_source, state.n_reference, in_reference
        )
        # entropy sees full neighborhoods (covariance is O(n)); only the
        # quadratic-cost transport sets are capped, drawn as (source, reference)
        h_joint = differential_entropy(np.vstack([pts_src, pts_ref]), cfg.entropy_default)
        h_sep = differential_entropy(pts_ref if in_reference else pts_src, cfg.entropy_default)
        cap = cfg.max_neighborhood_points
        sub_src = _subsample(pts_src, cap, rng)
        sub_ref = _subsample(pts_ref, cap, rng)
        d_lambda = _scaled_divergence(sub_src, sub_ref, radius, cfg)
        per_scale[s] = (h_joint, h_sep, d_lambda, rho_joint, rho_sep)
    c = float(state.covis[ordinal])
    d = float(np.linalg.norm(own_point - own_origin))
    b = 1.0 if in_reference else 0.0
    return AnchorFeatureVector(per_scale, np.array([c, d, b]), position.copy(), not in_reference)


def extract_anchor_features(
    pair: RegisteredPair,
    anchor_index: int,
    anchor_in_reference: bool,
    cfg: ScaleConfig,
    seed: int = 0,
    _state: _PairState | None = None,
) -> AnchorFeatureVector:
    """Features for a single anchor of a registered pair.

    The anchor is named by its index within the source cloud (transformed by
    the estimated transform into the reference frame) or within the reference
    cloud. Neighborhoods larger than cfg.max_neighborhood_points are
    subsampled with a generator seeded by (seed, anchor ordinal), so results
    do not depend on extraction order.
    """
    state = _state if _state is not None else _PairState(pair, cfg, seed)
    n_own = state.n_reference if anchor_in_reference else state.n_source
    if not 0 <= anchor_index < n_own:
        raise ValueError(f"anchor index {anchor_index} out of range")
    return _extract_one(state, anchor_index, anchor_in_reference)


def extract_pair_features(
    pair: RegisteredPair,
    n_anchors: int,
    cfg: ScaleConfig,
    seed: int = 0,
    start_source: int = 0,
    start_reference: int = 0,
) -> list[AnchorFeatureVector]:
    """Features for farthest-point-sampled anchors from both clouds.

    Selects `n_anchors` anchors per cloud (farthest point sampling on each
    cloud in its own frame, seeded by the start indices) and featurizes all
    2*n_anchors of them: source anchors first, then reference anchors.
    """
    if n_anchors < 1 or n_anchors > min(len(pair.source), len(pair.reference)):
        raise ValueError("n_anchors must be within both cloud sizes")
    state = _PairState(pair, cfg, seed)
    idx_src = farthest_point_sampling(pair.source.points, n_anchors, start_source)
    idx_ref = farthest_point_sampling(pair.reference.points, n_anchors, start_reference)
    out = [_extract_one(state, int(i), False) for i in idx_src]
    out += [_extract_one(state, int(i), True) for i in idx_ref]
    return out


def features_matrix(anchors: list[AnchorFeatureVector]) -> tuple[np.ndarray, np.ndarray]:
    """Stacks anchor features into (n, 5S+3) values and (n, 3) positions."""
    F = np.stack([a.vector for a in anchors])
    P = np.stack([a.anchor_position for a in anchors])
    return F, P


def write_feature_csv(path, anchors: list[AnchorFeatureVector]) -> None:
    """Dumps one row per (anchor, scale) for inspection."""
    with open(path, "w") as fh:
        fh.write("anchor_id,src_flag,scale,H_joint,H_sep,D_lambda,rho_joint,rho_sep,c,d\n")
        for i, a in enumerate(anchors):
            c, d, b = a.global_features
            src_flag = 0 if a.anchor_source else 1
            for s in range(a.per_scale.shape[0]):
                hj, hs, dl, rj, rs = a.per_scale[s]
                fh.write(f"{i},{src_flag},{s},{hj:.9g},{hs:.9g},{dl:.9g},{rj:.9g},{rs:.9g},{c:.9g},{d:.9g}\n")
