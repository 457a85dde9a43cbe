"""Synthetic labeled registration pairs at desk scale.

A scene is a ground plane, a handful of boxes and walls, and scatter
points. Views are sampled from sensor poses by area-weighted surface
sampling inside a view radius, optionally thinned with range so density
falls off the way it does for a spinning scanner. Pairs get a random rigid
perturbation of the true relative transform; the label is the mean
per-point discrepancy between the perturbed (or ICP-refined) estimate and
the truth. Everything is reproducible from integer seeds, and clouds are
rounded through the on-disk text precision before any label is computed so
stored labels recompute exactly from the files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    PointCloud,
    RegisteredPair,
    RigidTransform,
    SpatialIndex,
    icp_register,
    quantize_to_xyz_precision,
    read_xyz,
    rotation_yaw_roll_pitch,
    rotation_z,
    transform_discrepancy,
    write_xyz,
)

DENSITY_MODES = ("uniform", "range-falloff")
FALLOFF_RANGE = 10.0  # meters at which acceptance drops to 1/2
OVERLAP_NN_RADIUS = 1.0  # meters; a source point this close to the reference counts as shared
MIN_OVERLAP = 0.1


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines one synthetic scene and its two views."""

    seed: int = 0
    n_points: int = 2000
    n_boxes_range: tuple[int, int] = (3, 10)
    density_mode: str = "uniform"
    overlap_fraction: float = 0.85
    extent: float = 40.0
    view_radius: float = 25.0
    sensor_noise: float = 0.01
    # planar faces are blind to in-plane misalignment; clutter keeps the
    # local comparison features sensitive to every offset direction and
    # magnitude, so it carries a substantial share of the sampling weight
    scatter_weight: float = 0.6

    def __post_init__(self):
        if self.n_points < 100:
            raise ValueError("n_points must be >= 100")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}")
        if not 0.3 <= self.overlap_fraction <= 1.0:
            raise ValueError("overlap_fraction must be in [0.3, 1.0]")
        if self.extent <= 0 or self.view_radius <= 0:
            raise ValueError("extent and view_radius must be positive")
        if self.sensor_noise < 0:
            raise ValueError("sensor_noise must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_points": self.n_points,
            "n_boxes_range": list(self.n_boxes_range),
            "density_mode": self.density_mode,
            "overlap_fraction": self.overlap_fraction,
            "extent": self.extent,
            "view_radius": self.view_radius,
            "sensor_noise": self.sensor_noise,
            "scatter_weight": self.scatter_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["n_boxes_range"] = tuple(d["n_boxes_range"])
        return cls(**d)


@dataclass(frozen=True)
class PerturbSpec:
    """Per-axis Gaussian rigid noise; defaults are the noisy regime.

    `magnitude_range` draws a per-pair log-uniform multiplier for all six
    sigmas, spreading pair difficulty from near-aligned to badly off; None
    keeps the sigmas fixed.
    """

    translation_sigma: tuple[float, float, float] = (2.0, 2.0, 0.2)
    rotation_sigma_deg: tuple[float, float, float] = (10.0, 2.0, 2.0)  # yaw, roll, pitch
    magnitude_range: tuple[float, float] | None = None

    def __post_init__(self):
        if min(self.translation_sigma) < 0 or min(self.rotation_sigma_deg) < 0:
            raise ValueError("perturbation sigmas must be nonnegative")
        if self.magnitude_range is not None:
            lo, hi = self.magnitude_range
            if not (0 < lo <= hi):
                raise ValueError("magnitude_range must satisfy 0 < lo <= hi")

    def to_dict(self) -> dict:
        return {
            "translation_sigma": list(self.translation_sigma),
            "rotation_sigma_deg": list(self.rotation_sigma_deg),
            "magnitude_range": None if self.magnitude_range is None else list(self.magnitude_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbSpec":
        rng = d.get("magnitude_range")
        return cls(
            translation_sigma=tuple(d["translation_sigma"]),
            rotation_sigma_deg=tuple(d["rotation_sigma_deg"]),
            magnitude_range=None if rng is None else tuple(rng),
        )


MILD_PERTURB = PerturbSpec(
    translation_sigma=(0.5, 0.5, 0.1),
    rotation_sigma_deg=(4.0, 1.0, 1.0),
    magnitude_range=(0.25, 2.6),
)


@dataclass
class Scene:
    """Area-sampleable world geometry: parallelogram faces plus scatter."""

    origins: np.ndarray  # (f, 3) face corner
    edges_u: np.ndarray  # (f, 3)
    edges_v: np.ndarray  # (f, 3)
    areas: np.ndarray  # (f,)
    scatter: np.ndarray  # (m, 3)
    spec: SceneSpec


def _box_faces(cx, cy, w, d, h, yaw):
    """Four sides and the top of an upright box, as (origin, u, v) triples."""
    rot = rotation_z(yaw)
    corners = np.array(
        [[-w / 2, -d / 2, 0], [w / 2, -d / 2, 0], [w / 2, d / 2, 0], [-w / 2, d / 2, 0]]
    ) @ rot.T + np.array([cx, cy, 0.0])
    up = np.array([0.0, 0.0, h])
    faces = []
    for a in range(4):
        b = (a + 1) % 4
        faces.append((corners[a], corners[b] - corners[a], up))
    faces.append((corners[0], corners[1] - corners[0], corners[3] - corners[0]))
    return faces

def build_scene(spec: SceneSpec) -> Scene:
    """Deterministically constructs the scene geometry for a spec."""
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 11)))
    half = spec.extent / 2.0
    faces = [
        (
            np.array([-half, -half, 0.0]),
            np.array([spec.extent, 0.0, 0.0]),
            np.array([0.0, spec.extent, 0.0]),
        )
    ]
    lo, hi = spec.n_boxes_range
    n_objects = int(rng.integers(lo, hi + 1)) if hi > lo else lo
    for _ in range(n_objects):
        cx, cy = rng.uniform(-half + 4.0, half - 4.0, size=2)
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        if rng.uniform() < 0.5:
            w, d = rng.uniform(1.0, 6.0, size=2)
            h = rng.uniform(0.5, 4.0)
            faces.extend(_box_faces(cx, cy, w, d, h, yaw))
        else:
            length = rng.uniform(4.0, 15.0)
            height = rng.uniform(2.0, 5.0)
            direction = np.array([np.cos(yaw), np.sin(yaw), 0.0])
            origin = np.array([cx, cy, 0.0]) - 0.5 * length * direction
            faces.append((origin, length * direction, np.array([0.0, 0.0, height])))
    n_scatter = int(rng.integers(100, 201))
    scatter = np.column_stack(
        [
            rng.uniform(-half, half, size=n_scatter),
            rng.uniform(-half, half, size=n_scatter),
            rng.uniform(0.0, 3.0, size=n_scatter),
        ]
    )
    origins = np.array([f[0] for f in faces])
    edges_u = np.array([f[1] for f in faces])
    edges_v = np.array([f[2] for f in faces])
    areas = np.linalg.norm(np.cross(edges_u, edges_v), axis=1)
    return Scene(origins, edges_u, edges_v, areas, scatter, spec)


def _pose_token(pose: RigidTransform) -> int:
    """Stable integer identifying a pose; identical poses share samples."""
    digest = hashlib.blake2b(pose.to_flat().tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def render_view(scene: Scene, pose: RigidTransform, seed_key: tuple) -> PointCloud:
    """Samples one sensor view of the scene, expressed in the sensor frame.

    Surface patches are chosen with probability proportional to area (the
    scatter set gets `scatter_weight` of the total); points beyond the view
    radius are rejected, and in range-falloff mode survivors are kept with
    probability 1/(1+(d/d0)^2). Gaussian sensor noise is added, the cloud is
    mapped into the sensor frame, and coordinates are rounded to the on-disk
    text precision. The rng is keyed by `seed_key` plus a pose digest, so
    identical poses resample identical clouds.
    """
    spec = scene.spec
    rng = np.random.default_rng(
        np.random.SeedSequence(tuple(int(v) for v in seed_key) + (_pose_token(pose),))
    )
    origin_world = pose.translation
    weights = np.append(scene.areas, spec.scatter_weight * scene.areas.sum())
    cum = np.cumsum(weights / weights.sum())
    accepted = []
    n_kept = 0
    batch = 4 * spec.n_points
    for _ in range(200):
        pick = np.searchsorted(cum, rng.uniform(size=batch), side="right")
        ab = rng.uniform(size=(batch, 2))
        scatter_idx = rng.integers(0, scene.scatter.shape[0], size=batch)
        jitter = rng.normal(scale=0.05, size=(batch, 3))
        falloff_u = rng.uniform(size=batch)
        on_surface = pick < scene.areas.shape[0]
        surf = np.where(on_surface, pick, 0)
        pts = scene.origins[surf] + ab[:, :1] * scene.edges_u[surf] + ab[:, 1:] * scene.edges_v[surf]
        scatter_pts = scene.scatter[scatter_idx] + jitter
        pts = np.where(on_surface[:, None], pts, scatter_pts)
        dist = np.linalg.norm(pts - origin_world, axis=1)
        keep = dist <= spec.view_radius
        if spec.density_mode == "range-falloff":
            keep &= falloff_u < 1.0 / (1.0 + (dist / FALLOFF_RANGE) ** 2)
        kept = pts[keep]
        accepted.append(kept)
        n_kept += kept.shape[0]
        if n_kept >= spec.n_points:
            break
    else:
        raise RuntimeError("sensor pose sees too few surface points")
    world = np.concatenate(accepted)[: spec.n_points]
    if spec.sensor_noise > 0:
        world = world + rng.normal(scale=spec.sensor_noise, size=world.shape)
    local = pose.inverse().apply(world)
    return PointCloud(quantize_to_xyz_precision(local), np.zeros(3))


def _sample_pose(spec: SceneSpec, rng) -> RigidTransform:
    x, y = rng.uniform(-spec.extent / 4.0, spec.extent / 4.0, size=2)
    z = rng.uniform(1.2, 1.8)
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    return RigidTransform(rotation_z(yaw), np.array([x, y, z]))


def _sample_motion(spec: SceneSpec, rng) -> RigidTransform:
    """Frame-to-frame motion sized by the overlap target; 1.0 means none."""
    gap = 1.0 - spec.overlap_fraction
    heading = rng.uniform(0.0, 2.0 * np.pi)
    distance = gap * spec.view_radius
    dyaw = gap * rng.uniform(-np.pi / 2.0, np.pi / 2.0)
    translation = distance * np.array([np.cos(heading), np.sin(heading), 0.0])
    return RigidTransform(rotation_z(dyaw), translation)


def pair_overlap(source: PointCloud, reference: PointCloud, t_star: RigidTransform) -> float:
    """Fraction of aligned source points within 1 m of some reference point."""
    aligned = t_star.apply(source.points)
    dist, _ = SpatialIndex(reference.points).nearest(aligned)
    return float(np.mean(dist <= OVERLAP_NN_RADIUS))


def generate_scene(spec: SceneSpec) -> tuple[PointCloud, PointCloud, RigidTransform]:
    """One labeled-pair scene: source view, reference view, true transform.

    The reference is rendered at a base pose, the source at that pose
    composed with a small motion; both clouds live in their own sensor
    frames and the returned transform maps source frame to reference frame.
    Pairs whose sampled views share less than 10% of points are regenerated
    with a fresh internal seed, up to 10 attempts.
    """
    scene = build_scene(spec)
    for attempt in range(10):
        rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 13, attempt)))
        pose_ref = _sample_pose(spec, rng)
        pose_src = pose_ref.compose(_sample_motion(spec, rng))
        reference = render_view(scene, pose_ref, (spec.seed, 17, attempt))
        source = render_view(scene, pose_src, (spec.seed, 17, attempt))
        t_star = pose_ref.inverse().compose(pose_src)
        if pair_overlap(source, reference, t_star) >= MIN_OVERLAP:
            return source, reference, t_star
    raise RuntimeError("could not sample an overlapping pair in 10 attempts")


def draw_perturbation(perturb: PerturbSpec, rng) -> RigidTransform:
    """Gaussian per-axis translation plus yaw/roll/pitch rotation noise."""
    scale = 1.0
    if perturb.magnitude_range is not None:
        lo, hi = perturb.magnitude_range
        scale = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    translation = scale * rng.normal(size=3) * np.asarray(perturb.translation_sigma)
    yaw, roll, pitch = scale * rng.normal(size=3) * np.radians(perturb.rotation_sigma_deg)
    return RigidTransform(rotation_yaw_roll_pitch(yaw, roll, pitch), translation)


def make_pair(
    scene: tuple[PointCloud, PointCloud, RigidTransform],
    perturb: PerturbSpec,
    register_with_icp: bool = False,
    seed: int = 0,
    fixed_noise: RigidTransform | None = None,
    icp_max_iters: int = 50,
) -> RegisteredPair:
    """Builds a labeled pair by perturbing the true transform.

    The estimate is noise composed with the truth, refined by ICP from that
    initialization when requested. `fixed_noise` substitutes a specific
    perturbation for the random draw. ICP degeneracy propagates.
    """
    source, reference, t_star = scene
    if fixed_noise is None:
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), 19)))
        noise = draw_perturbation(perturb, rng)
    else:
        noise = fixed_noise
    estimate = noise.compose(t_star)
    if register_with_icp:
        estimate = icp_register(source, reference, init=estimate, max_iters=icp_max_iters)
    label = transform_discrepancy(source.points, estimate, t_star)
    return RegisteredPair(source, reference, estimate, t_star, label)


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    directory: str  # relative to the dataset root
    scene_seed: int
    pair_seed: int
    split: str
    label: float


@dataclass
class DatasetManifest:
    """Index of a generated dataset: config echo plus per-pair records."""

    config: dict
    records: list[PairRecord]

    def split_records(self, split: str) -> list[PairRecord]:
        return [r for r in self.records if r.split == split]

    def labels(self, split: str) -> np.ndarray:
        return np.array([r.label for r in self.split_records(split)])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "pairs": [
                {
                    "pair_id": r.pair_id,
                    "directory": r.directory,
                    "scene_seed": r.scene_seed,
                    "pair_seed": r.pair_seed,
                    "split": r.split,
                    "label": r.label,
                }
                for r in self.records
            ],
            "splits": {
                s: [r.pair_id for r in self.split_records(s)]
                for s in ("train", "val", "test")
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        records = [
            PairRecord(
                pair_id=p["pair_id"],
                directory=p["directory"],
                scene_seed=p["scene_seed"],
                pair_seed=p["pair_seed"],
                split=p["split"],
                label=p["label"],
            )
            for p in d["pairs"]
        ]
        return cls(config=d["config"], records=records)


def write_json_atomic(path, payload: dict) -> None:
    """Serializes with sorted keys via a temp file, then renames into place."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def split_sizes(n_pairs: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must be 3 nonnegative numbers summing to 1")
    n_train = int(round(ratios[0] * n_pairs))
    n_val = int(round(ratios[1] * n_pairs))
    n_test = n_pairs - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split ratios produce a negative split")
    return n_train, n_val, n_test


def build_dataset(
    root,
    n_pairs: int,
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    scene_template: SceneSpec | None = None,
    perturb: PerturbSpec | None = None,
    register_with_icp: bool = False,
    master_seed: int = 0,
) -> DatasetManifest:
    """Generates, labels, and persists a full dataset under `root`.

    One scene per pair; scene seeds are consecutive integers so the
    train/val/test assignment is by disjoint seed ranges. Each pair
    directory holds `source.xyz`, `reference.xyz`, and `meta.json`;
    `manifest.json` at the root indexes everything. Rebuilding with the
    same arguments writes byte-identical files.
    """
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    scene_template = scene_template if scene_template is not None else SceneSpec()
    perturb = perturb if perturb is not None else PerturbSpec()
    n_train, n_val, n_test = split_sizes(n_pairs, split_ratios)
    root = os.fspath(root)
    os.makedirs(os.path.join(root, "pairs"), exist_ok=True)
    records = []
    for i in range(n_pairs):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        scene_seed = i
        pair_seed = int(
            np.random.SeedSequence((int(master_seed), 23, i)).generate_state(1)[0]
        )
        spec = replace(scene_template, seed=pair_seed)
        scene = generate_scene(spec)
        pair = make_pair(scene, perturb, register_with_icp=register_with_icp, seed=pair_seed)
        pair_id = f"pair_{i:05d}"
        rel_dir = os.path.join("pairs", pair_id)
        pair_dir = os.path.join(root, rel_dir)
        os.makedirs(pair_dir, exist_ok=True)
        write_xyz(os.path.join(pair_dir, "source.xyz"), pair.source)
        write_xyz(os.path.join(pair_dir, "reference.xyz"), pair.reference)
        write_json_atomic(
            os.path.join(pair_dir, "meta.json"),
            {
                "estimated": pair.estimated.to_flat().tolist(),
                "ground_truth": pair.ground_truth.to_flat().tolist(),
                "label": pair.label,
                "scene_seed": scene_seed,
                "pair_seed": pair_seed,
                "source_origin": pair.source.sensor_origin.tolist(),
                "reference_origin": pair.reference.sensor_origin.tolist(),
                "n_source": len(pair.source),
                "n_reference": len(pair.reference),
                "register_with_icp": register_with_icp,
            },
        )
        records.append(
            PairRecord(
                pair_id=pair_id,
                directory=rel_dir,
                scene_seed=scene_seed,
                pair_seed=pair_seed,
                split=split,
                label=pair.label,
            )
        )
    manifest = DatasetManifest(
        config={
            "n_pairs": n_pairs,
            "split_ratios": list(split_ratios),
            "scene": scene_template.to_dict(),
            "perturb": perturb.to_dict(),
            "register_with_icp": register_with_icp,
            "master_seed": master_seed,
        },
        records=records,
    )
    write_json_atomic(os.path.join(root, "manifest.json"), manifest.to_dict())
    return manifest


def load_manifest(root) -> DatasetManifest:
    path = os.path.join(os.fspath(root), "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest.json under {root}")
    with open(path) as fh:
        return DatasetManifest.from_dict(json.load(fh))


def load_pair(root, record: PairRecord) -> RegisteredPair:
    """Reads one stored pair; construction revalidates the label."""
    pair_dir = os.path.join(os.fspath(root), record.directory)
    with open(os.path.join(pair_dir, "meta.json")) as fh:
        meta = json.load(fh)
    source = read_xyz(
        os.path.join(pair_dir, "source.xyz"), np.asarray(meta["source_origin"])
    )
    reference = read_xyz(
        os.path.join(pair_dir, "reference.xyz"), np.asarray(meta["reference_origin"])
    )
    return RegisteredPair(
        source=source,
        reference=reference,
        estimated=RigidTransform.from_flat(meta["estimated"]),
        ground_truth=RigidTransform.from_flat(meta["ground_truth"]),
        label=meta["label"],
    )
