"""Map-building simulation: chained ICP with detection-guided repair.

A sensor walks through one synthetic scene; consecutive frames are
registered by ICP from identity, so registration quality varies with the
motion (occasional large jumps make ICP fail outright). Chaining the
per-pair estimates accumulates drift. A detector scores each pair's
misalignment; the worst pairs (top-k for a target rate, or all above a
threshold) get their estimate replaced by the ground-truth transform, and
the report is the final-frame error of the repaired chain. Sweeping the
rate over a grid traces the error-vs-rate curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .features import extract_pair_features, features_matrix
from .geometry import (
    DegenerateGeometryError,
    PointCloud,
    RegisteredPair,
    RigidTransform,
    icp_register,
    rotation_z,
    transform_discrepancy,
)
from .model import forward
from .synthdata import SceneSpec, build_scene, render_view

DEFAULT_THRESHOLD = 0.1212  # meters of predicted error


@dataclass(frozen=True)
class TrajectorySpec:
    """A seeded walk through one scene, with occasional large jumps."""

    seed: int = 0
    n_frames: int = 12
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(n_points=1000))
    # small steps ICP can track, with occasional jumps that break it
    small_step: tuple[float, float] = (0.5, 2.0)
    big_step: tuple[float, float] = (6.0, 12.0)
    big_step_prob: float = 0.18
    small_turn_deg: float = 8.0
    big_turn_deg: float = 60.0
    icp_max_iters: int = 50

    def __post_init__(self):
        if self.n_frames < 10:
            raise ValueError("a trajectory needs at least 10 frames")
        if not 0.0 <= self.big_step_prob <= 1.0:
            raise ValueError("big_step_prob must be in [0, 1]")


@dataclass
class Trajectory:
    """Frames, true poses, and per-pair ICP outcomes for one walk."""

    spec: TrajectorySpec
    frames: list[PointCloud]
    true_poses: list[RigidTransform]  # world <- sensor_i
    rel_truths: list[RigidTransform]  # frame i-1 <- frame i
    estimates: list[RigidTransform]  # ICP, identity when it failed
    pair_errors: np.ndarray  # per-pair true alignment error
    icp_failed: np.ndarray  # bool

    @property
    def n_pairs(self) -> int:
        return len(self.rel_truths)


def simulate_trajectory(spec: TrajectorySpec) -> Trajectory:
    """Renders the walk and registers every consecutive frame pair once.

    The expensive parts (rendering, ICP) happen here so detectors and
    selection policies can be compared on the same trajectory.
    """
    scene = build_scene(replace(spec.scene, seed=spec.seed))
    rng = np.random.default_rng(np.random.SeedSequence((int(spec.seed), 31)))
    limit = spec.scene.extent / 2.0 - 6.0
    pos = rng.uniform(-5.0, 5.0, size=2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    poses = []
    for _ in range(spec.n_frames):
        z = rng.uniform(1.2, 1.8)
        poses.append(
            RigidTransform(rotation_z(heading), np.array([pos[0], pos[1], z]))
        )
        big = rng.uniform() < spec.big_step_prob
        lo, hi = spec.big_step if big else spec.small_step
        step = rng.uniform(lo, hi)
        turn = math.radians(spec.big_turn_deg if big else spec.small_turn_deg)
        heading = heading + rng.uniform(-turn, turn)
        candidate = pos + step * np.array([np.cos(heading), np.sin(heading)])
        if np.abs(candidate).max() > limit:
            # aim back toward the middle of the scene
            heading = math.atan2(-pos[1], -pos[0]) + rng.uniform(-0.3, 0.3)
            candidate = pos + step * np.array([np.cos(heading), np.sin(heading)])
        pos = candidate
    frames = [
        render_view(scene, pose, (spec.seed, 33, i)) for i, pose in enumerate(poses)
    ]
    rel_truths, estimates, errors, failed = [], [], [], []
    for i in range(1, spec.n_frames):
        t_star = poses[i - 1].inverse().compose(poses[i])
        try:
            est = icp_register(
                frames[i], frames[i - 1], max_iters=spec.icp_max_iters
            )
            fail = False
        except DegenerateGeometryError:
            est = RigidTransform.identity()
            fail = True
        rel_truths.append(t_star)
        estimates.append(est)
        errors.append(transform_discrepancy(frames[i].points, est, t_star))
        failed.append(fail)
    return Trajectory(
        spec=spec,
        frames=frames,
        true_poses=poses,
        rel_truths=rel_truths,
        estimates=estimates,
        pair_errors=np.array(errors),
        icp_failed=np.array(failed, dtype=bool),
    )


def detector_scores(traj: Trajectory, detector, seed: int = 0) -> np.ndarray:
    """Per-pair misalignment scores: higher means flag sooner.

    `detector` is "oracle" (true per-pair errors), "random" (seeded uniform
    scores), or a loaded checkpoint dict, whose model scores features
    extracted from each consecutive pair.
    """
    if isinstance(detector, str):
        if detector == "oracle":
            return traj.pair_errors.copy()
        if detector == "random":
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), 41)))
            return rng.uniform(size=traj.n_pairs)
        raise ValueError(f"unknown detector {detector!r}")
    params = detector["params"]
    cfg = detector["scale_config"]
    mean = detector["feature_mean"]
    std = detector["feature_std"]
    scores = np.empty(traj.n_pairs)
    for i in range(traj.n_pairs):
        pair = RegisteredPair(
            source=traj.frames[i + 1],
            reference=traj.frames[i],
            estimated=traj.estimates[i],
            ground_truth=traj.rel_truths[i],
            label=traj.pair_errors[i],
        )
        anchors = extract_pair_features(
            pair, detector["n_anchors"], cfg, seed=int(traj.spec.seed) * 1000 + i
        )
        F, P = features_matrix(anchors)
        scores[i] = forward((F - mean) / std, P, params)
    return scores


def select_flags(
    traj: Trajectory,
    scores: np.ndarray,
    rate: float | None = None,
    threshold: float | None = None,
) -> np.ndarray:
    """Which pairs to repair with ground truth.

    Rate mode flags the top round(rate * n_pairs) scores (ties to the
    earlier pair); threshold mode flags scores strictly above the cut.
    Pairs whose ICP failed outright score +inf, so any nonzero budget
    repairs them first; a rate of 0 repairs nothing.
    """
    if (rate is None) == (threshold is None):
        raise ValueError("pass exactly one of rate, threshold")
    effective = np.where(traj.icp_failed, np.inf, np.asarray(scores, dtype=np.float64))
    flags = np.zeros(traj.n_pairs, dtype=bool)
    if rate is not None:
        if not 0.0 <= rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        k = int(round(rate * traj.n_pairs))
        order = np.lexsort((np.arange(traj.n_pairs), -effective))
        flags[order[:k]] = True
    else:
        flags = effective > threshold
    return flags


def chained_final_error(traj: Trajectory, flags: np.ndarray) -> float:
    """Eq.-style final-frame error of the chain with flagged links repaired."""
    est_pose = RigidTransform.identity()
    true_pose = RigidTransform.identity()
    for i in range(traj.n_pairs):
        rel = traj.rel_truths[i] if flags[i] else traj.estimates[i]
        est_pose = est_pose.compose(rel)
        true_pose = true_pose.compose(traj.rel_truths[i])
    return transform_discrepancy(traj.frames[-1].points, est_pose, true_pose)


@dataclass
class MapSimReport:
    n_frames: int
    detector: str
    rate: float | None
    threshold: float | None
    final_error: float
    flags: list[bool]
    pair_errors: list[float]
    icp_failed: list[bool]
    sweep: list[tuple[float, float]] | None = None  # (rate, final_error)

    def __post_init__(self):
        if self.rate is not None and not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        if self.final_error < 0:
            raise ValueError("final error cannot be negative")

    @property
    def flagged_fraction(self) -> float:
        return sum(self.flags) / len(self.flags) if self.flags else 0.0

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "detector": self.detector,
            "rate": self.rate,
            "threshold": self.threshold,
            "final_error": self.final_error,
            "flags": list(map(bool, self.flags)),
            "pair_errors": list(map(float, self.pair_errors)),
            "icp_failed": list(map(bool, self.icp_failed)),
            "flagged_fraction": self.flagged_fraction,
            "sweep": None if self.sweep is None else [list(r) for r in self.sweep],
        }


def sweep_rates(traj: Trajectory, scores: np.ndarray, rates) -> list[tuple[float, float]]:
    """(rate, final error) across a rate grid, reusing one trajectory."""
    out = []
    for rate in rates:
        flags = select_flags(traj, scores, rate=float(rate))
        out.append((float(rate), chained_final_error(traj, flags)))
    return out


def run_mapsim(
    spec: TrajectorySpec,
    detector="oracle",
    rate: float | None = None,
    threshold: float | None = None,
    sweep: list[float] | None = None,
    detector_seed: int = 0,
) -> MapSimReport:
    """Simulates one trajectory and reports the repaired-chain error.

    Exactly one of `rate` and `threshold` selects the repair policy for the
    headline number; `sweep` optionally adds an error-vs-rate table reusing
    the same trajectory and scores.
    """
    traj = simulate_trajectory(spec)
    scores = detector_scores(traj, detector, seed=detector_seed)
    flags = select_flags(traj, scores, rate=rate, threshold=threshold)
    report = MapSimReport(
        n_frames=spec.n_frames,
        detector=detector if isinstance(detector, str) else "checkpoint",
        rate=rate,
        threshold=threshold,
        final_error=chained_final_error(traj, flags),
        flags=flags.tolist(),
        pair_errors=traj.pair_errors.tolist(),
        icp_failed=traj.icp_failed.tolist(),
        sweep=sweep_rates(traj, scores, sweep) if sweep is not None else None,
    )
    return report


def random_baseline_error(
    traj: Trajectory, rate: float, n_draws: int = 5, seed: int = 0
) -> float:
    """Mean final error of random selection at a rate, over several draws."""
    errors = []
    for draw in range(n_draws):
        scores = detector_scores(traj, "random", seed=seed * 100 + draw)
        flags = select_flags(traj, scores, rate=rate)
        errors.append(chained_final_error(traj, flags))
    return float(np.mean(errors))
