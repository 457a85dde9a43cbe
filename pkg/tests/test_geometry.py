"""Tests for clouds, transforms, sampling, spatial queries, ICP, and XYZ I/O."""

import numpy as np
import pytest

from misalign.geometry import (
    DegenerateGeometryError,
    PointCloud,
    RegisteredPair,
    RigidTransform,
    SpatialIndex,
    alignment_error,
    farthest_point_sampling,
    fit_rigid,
    icp_register,
    quantize_to_xyz_precision,
    read_xyz,
    rotation_yaw_roll_pitch,
    rotation_z,
    transform_discrepancy,
    voxel_downsample,
    write_xyz,
)


def random_rigid(rng, max_angle=np.pi, max_shift=5.0):
    angles = rng.uniform(-max_angle, max_angle, 3)
    rot = rotation_yaw_roll_pitch(*angles)
    return RigidTransform(rot, rng.uniform(-max_shift, max_shift, 3))


def brute_force_fps(points, k, start_index):
    """Independent oracle: literal max-min selection with lowest-index ties."""
    selected = [start_index]
    while len(selected) < k:
        best_idx, best_dist = None, -1.0
        for i in range(len(points)):
            d = min(np.linalg.norm(points[i] - points[j]) for j in selected)
            if d > best_dist + 1e-15:
                best_idx, best_dist = i, d
        selected.append(best_idx)
    return np.array(selected)


class TestRigidTransform:
    def test_identity_roundtrip(self):
        t = RigidTransform.identity()
        pts = np.random.default_rng(0).normal(size=(10, 3))
        np.testing.assert_allclose(t.apply(pts), pts)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            t = random_rigid(rng)
            round_trip = t.compose(t.inverse())
            np.testing.assert_allclose(round_trip.rotation, np.eye(3), atol=1e-9)
            np.testing.assert_allclose(round_trip.translation, np.zeros(3), atol=1e-9)

    def test_compose_matches_sequential_application(self):
        rng = np.random.default_rng(3)
        a, b = random_rigid(rng), random_rigid(rng)
        pts = rng.normal(size=(50, 3))
        np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-12)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_flat_roundtrip(self):
        t = random_rigid(np.random.default_rng(7))
        back = RigidTransform.from_flat(t.to_flat())
        np.testing.assert_allclose(back.rotation, t.rotation)
        np.testing.assert_allclose(back.translation, t.translation)


class TestAlignmentError:
    def test_identical_transforms_zero(self):
        pts = np.random.default_rng(1).normal(size=(30, 3))
        t = RigidTransform.identity()
        assert transform_discrepancy(pts, t, t) == 0.0

    def test_pure_translation_is_norm(self):
        pts = np.random.default_rng(2).normal(size=(30, 3))
        est = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
        assert transform_discrepancy(pts, est, RigidTransform.identity()) == pytest.approx(1.0, abs=1e-15)

    def test_rotation_case_matches_per_point_oracle(self):
        # rotate_z(90 deg) vs identity on {(1,0,0),(2,0,0)}: chords sqrt(2) and 2*sqrt(2)
        pts = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        est = RigidTransform(rotation_z(np.pi / 2), np.zeros(3))
        gt = RigidTransform.identity()
        oracle = np.mean([np.linalg.norm(est.apply(p) - gt.apply(p)) for p in pts])
        value = transform_discrepancy(pts, est, gt)
        np.testing.assert_allclose(value, oracle, rtol=1e-15)
        np.testing.assert_allclose(value, (np.sqrt(2) + 2 * np.sqrt(2)) / 2, rtol=1e-12)
        np.testing.assert_allclose(value, 2.1213203435596424, rtol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(40, 3))
        est, gt = random_rigid(rng), random_rigid(rng)
        perm = rng.permutation(40)
        a = transform_discrepancy(pts, est, gt)
        b = transform_discrepancy(pts[perm], est, gt)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_empty_source_raises(self):
        t = RigidTransform.identity()
        with pytest.raises(ValueError, match="empty point cloud"):
            transform_discrepancy(np.empty((0, 3)), t, t)

    def test_registered_pair_validates_label(self):
        pts = np.random.default_rng(8).normal(size=(10, 3))
        src = PointCloud(pts)
        ref = PointCloud(pts)
        est = RigidTransform(np.eye(3), [0.5, 0.0, 0.0])
        gt = RigidTransform.identity()
        pair = RegisteredPair(src, ref, est, gt, 0.5)
        assert alignment_error(pair) == pytest.approx(0.5)
        with pytest.raises(ValueError, match="disagrees"):
            RegisteredPair(src, ref, est, gt, 0.7)


class TestFarthestPointSampling:
    def test_exhaustive_is_permutation(self):
        pts = np.random.default_rng(11).normal(size=(25, 3))
        idx = farthest_point_sampling(pts, 25, start_index=4)
        assert sorted(idx) == list(range(25))

    def test_single_point_is_seed(self):
        pts = np.random.default_rng(12).normal(size=(9, 3))
        assert list(farthest_point_sampling(pts, 1, start_index=3)) == [3]

    def test_line_example(self):
        # points at 0, 1, 10 on a line: from index 0 the farthest is index 2
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
        assert list(farthest_point_sampling(pts, 2, start_index=0)) == [0, 2]
        assert list(brute_force_fps(pts, 2, 0)) == [0, 2]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            pts = rng.normal(size=(rng.integers(5, 20), 3))
            k = int(rng.integers(1, len(pts) + 1))
            start = int(rng.integers(0, len(pts)))
            got = farthest_point_sampling(pts, k, start)
            expected = brute_force_fps(pts, k, start)
            np.testing.assert_array_equal(got, expected)

    def test_spread_beats_random_subsets(self):
        def min_pairwise(pts):
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            return d[np.triu_indices(len(pts), 1)].min()

        rng = np.random.default_rng(14)
        wins = 0
        for _ in range(20):
            pts = rng.normal(size=(60, 3))
            chosen = pts[farthest_point_sampling(pts, 8, 0)]
            random_subset = pts[rng.choice(60, 8, replace=False)]
            if min_pairwise(chosen) >= min_pairwise(random_subset):
                wins += 1
        assert wins == 20

    def test_out_of_range_k(self):
        pts = np.zeros((4, 3))
        with pytest.raises(ValueError):
            farthest_point_sampling(pts, 5, 0)
        with pytest.raises(ValueError):
            farthest_point_sampling(pts, 0, 0)


class TestSpatialIndex:
    def test_empty_result_off_cloud(self):
        idx = SpatialIndex(np.zeros((1, 3)))
        assert idx.radius_query([10.0, 0, 0], 0.5).size == 0

    def test_huge_radius_returns_all(self):
        pts = np.random.default_rng(21).normal(size=(100, 3))
        idx = SpatialIndex(pts)
        assert len(idx.radius_query([0.0, 0, 0], 1e9)) == 100

    def test_unit_grid_origin(self):
        # 3x3x3 integer grid centered on origin: exactly 7 points within L2 <= 1
        grid = np.array([[x, y, z] for x in (-1, 0, 1) for y in (-1, 0, 1) for z in (-1, 0, 1)], dtype=float)
        brute = np.where(np.linalg.norm(grid, axis=1) <= 1.0)[0]
        assert len(brute) == 7
        got = SpatialIndex(grid).radius_query([0.0, 0, 0], 1.0)
        np.testing.assert_array_equal(got, brute)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(22)
        for _ in range(15):
            pts = rng.normal(size=(rng.integers(1, 400), 3))
            center = rng.normal(size=3)
            r = float(rng.uniform(0.2, 2.0))
            brute = np.where(np.linalg.norm(pts - center, axis=1) <= r)[0]
            got = SpatialIndex(pts).radius_query(center, r)
            np.testing.assert_array_equal(got, brute)

    def test_boundary_is_inclusive(self):
        pts = np.array([[1.0, 0.0, 0.0]])
        got = SpatialIndex(pts).radius_query([0.0, 0, 0], 1.0)
        np.testing.assert_array_equal(got, [0])


class TestRigidFitAndICP:
    def test_fit_recovers_known_transform(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            src = rng.normal(size=(100, 3))
            truth = random_rigid(rng)
            fit = fit_rigid(src, truth.apply(src))
            np.testing.assert_allclose(fit.rotation, truth.rotation, atol=1e-9)
            np.testing.assert_allclose(fit.translation, truth.translation, atol=1e-9)

    def test_fit_rejects_collinear(self):
        line = np.outer(np.arange(10, dtype=float), [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateGeometryError, match="degenerate geometry"):
            fit_rigid(line, line + [1.0, 0, 0])

    def test_icp_fixed_point(self):
        pts = np.random.default_rng(33).uniform(-3, 3, size=(200, 3))
        cloud = PointCloud(pts)
        result = icp_register(cloud, cloud)
        np.testing.assert_allclose(result.rotation, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(result.translation, np.zeros(3), atol=1e-6)

    def test_icp_recovers_translation(self):
        # oracle: closed-form fit on the known correspondences gives the exact answer
        rng = np.random.default_rng(34)
        src_pts = rng.uniform(-4, 4, size=(500, 3)) * np.array([1.0, 0.7, 0.4])
        shift = np.array([0.5, 0.0, 0.0])
        oracle = fit_rigid(src_pts, src_pts + shift)
        np.testing.assert_allclose(oracle.translation, shift, atol=1e-12)
        result = icp_register(PointCloud(src_pts), PointCloud(src_pts + shift))
        np.testing.assert_allclose(result.translation, shift, atol=1e-3)
        np.testing.assert_allclose(result.rotation, np.eye(3), atol=1e-3)

    def test_icp_recovers_small_rotation(self):
        rng = np.random.default_rng(35)
        src_pts = rng.uniform(-4, 4, size=(500, 3)) * np.array([1.0, 0.6, 0.3])
        angle = np.deg2rad(5.0)
        truth = RigidTransform(rotation_z(angle), np.zeros(3))
        result = icp_register(PointCloud(src_pts), PointCloud(truth.apply(src_pts)))
        # recovered rotation angle within 0.1 degrees of the generating value
        cos_err = (np.trace(result.rotation @ truth.rotation.T) - 1) / 2
        assert np.rad2deg(np.arccos(np.clip(cos_err, -1, 1))) < 0.1

    def test_icp_residual_monotone(self):
        rng = np.random.default_rng(36)
        src_pts = rng.uniform(-4, 4, size=(300, 3)) * np.array([1.0, 0.6, 0.3])
        truth = RigidTransform(rotation_z(0.2), np.array([0.8, -0.3, 0.1]))
        log: list = []
        icp_register(PointCloud(src_pts), PointCloud(truth.apply(src_pts)), history=log, max_iters=40)
        diffs = np.diff(log)
        assert np.all(diffs <= 1e-12)

    def test_icp_needs_three_points(self):
        with pytest.raises(ValueError):
            icp_register(PointCloud(np.zeros((2, 3))), PointCloud(np.zeros((5, 3))))


class TestXYZAndVoxel:
    def test_write_read_roundtrip(self, tmp_path):
        pts = quantize_to_xyz_precision(np.random.default_rng(41).normal(scale=20, size=(50, 3)))
        path = tmp_path / "cloud.xyz"
        write_xyz(path, PointCloud(pts))
        back = read_xyz(path)
        np.testing.assert_array_equal(back.points, pts)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("# header\n\n1 2 3\n4 5 6  # trailing comment\n")
        cloud = read_xyz(path)
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])

    def test_quantization_is_idempotent(self):
        pts = np.random.default_rng(43).normal(scale=30, size=(40, 3))
        once = quantize_to_xyz_precision(pts)
        twice = quantize_to_xyz_precision(once)
        np.testing.assert_array_equal(once, twice)

    def test_voxel_downsample_centroids(self):
        # two tight clusters one voxel apart collapse to their centroids
        a = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]])
        b = np.array([[1.1, 0.1, 0.1], [1.3, 0.1, 0.1]])
        down = voxel_downsample(PointCloud(np.vstack([a, b])), voxel_size=1.0)
        np.testing.assert_allclose(down.points, np.vstack([a.mean(0), b.mean(0)]))

    def test_voxel_downsample_deterministic_order(self):
        rng = np.random.default_rng(44)
        pts = rng.uniform(-5, 5, size=(500, 3))
        d1 = voxel_downsample(PointCloud(pts), 0.5).points
        d2 = voxel_downsample(PointCloud(rng.permutation(pts)), 0.5).points
        np.testing.assert_allclose(d1, d2, atol=1e-12)
