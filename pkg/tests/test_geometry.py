import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semreg.geometry import (
    LabeledPointCloud,
    Pose,
    PoseError,
    Twist,
    apply,
    compose,
    crop_by_label,
    invert,
    look_at,
    matrix_to_quat,
    pose_error,
    pose_from_dict,
    pose_to_dict,
    quat_from_axis_angle,
    quat_to_matrix,
    quaternion_angle,
)


# --- independent oracles -----------------------------------------------------

def rotmat_z(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def geodesic_angle_deg(R1, R2):
    """Angle between two rotation matrices: acos((trace(R1^T R2) - 1) / 2)."""
    arg = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, arg))))


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_pose(rng, max_angle_deg=180.0, max_t=1.0):
    axis = rng.normal(size=3)
    angle = math.radians(rng.uniform(0, max_angle_deg))
    return Pose(quat_from_axis_angle(axis, angle), rng.uniform(-max_t, max_t, 3))


# --- Pose / Twist ------------------------------------------------------------

class TestPose:
    def test_constructor_normalizes(self):
        p = Pose([2.0, 0.0, 0.0, 0.0], [0, 0, 0])
        assert abs(np.linalg.norm(p.q) - 1.0) < 1e-9

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose([0, 0, 0, 0], [0, 0, 0])

    def test_compose_identity(self):
        p = Pose(quat_from_axis_angle([1, 2, 3], 0.7), [0.1, -0.2, 0.3])
        r = compose(Pose.identity(), p)
        assert np.allclose(r.q, p.q, atol=1e-12)
        assert np.allclose(r.t, p.t, atol=1e-12)

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = random_pose(rng)
            e = compose(p, invert(p))
            assert quaternion_angle(e.q, [1, 0, 0, 0]) < 1e-9 * 180 / math.pi
            assert np.linalg.norm(e.t) < 1e-9

    def test_two_45deg_z_rotations(self):
        # oracle: multiply the 3x3 rotation matrices directly
        expected = rotmat_z(45) @ rotmat_z(45)
        p45 = Pose(quat_from_axis_angle([0, 0, 1], math.radians(45)), [0, 0, 0])
        got = compose(p45, p45).rotation_matrix()
        assert np.allclose(got, expected, atol=1e-12)
        assert geodesic_angle_deg(got, rotmat_z(90)) < 1e-9

    def test_compose_matches_matrix_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            got = compose(a, b).matrix()
            expected = a.matrix() @ b.matrix()
            assert np.allclose(got, expected, atol=1e-12)

    def test_matrix_quat_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            q = random_unit_quats(rng, 1)[0]
            q2 = matrix_to_quat(quat_to_matrix(q))
            # sign of the recovered quaternion is arbitrary (double cover)
            err = min(np.abs(q - q2).max(), np.abs(q + q2).max())
            assert err < 1e-12

    def test_arrays_are_readonly(self):
        p = Pose.identity()
        with pytest.raises(ValueError):
            p.t[0] = 1.0


class TestTwist:
    def test_exp_of_zero_is_identity(self):
        e = Twist([0, 0, 0], [0, 0, 0]).exp()
        assert np.allclose(e.q, [1, 0, 0, 0])
        assert np.allclose(e.t, [0, 0, 0])

    def test_exp_negation_inverts(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            w = rng.uniform(-2, 2, 3)
            v = rng.uniform(-1, 1, 3)
            e = compose(Twist(w, v).exp(), Twist(-w, -v).exp())
            assert quaternion_angle(e.q, [1, 0, 0, 0]) < 1e-9 * 180 / math.pi
            assert np.linalg.norm(e.t) < 1e-9

    def test_pure_rotation_matches_axis_angle(self):
        e = Twist([0, 0, math.radians(30)], [0, 0, 0]).exp()
        assert np.allclose(e.rotation_matrix(), rotmat_z(30), atol=1e-12)

    def test_small_angle_series_continuous(self):
        tiny = Twist([1e-12, 0, 0], [0.5, 0.25, 0.125]).exp()
        assert np.allclose(tiny.t, [0.5, 0.25, 0.125], atol=1e-11)


# --- apply -------------------------------------------------------------------

class TestApply:
    def test_identity_leaves_cloud(self):
        cloud = LabeledPointCloud([[1, 2, 3], [4, 5, 6]], [1, 2])
        out = apply(Pose.identity(), cloud)
        assert np.allclose(out.points, cloud.points)
        assert np.array_equal(out.labels, cloud.labels)

    def test_pure_translation(self):
        cloud = LabeledPointCloud([[0, 0, 0]], [0])
        out = apply(Pose([1, 0, 0, 0], [1, 0, 0]), cloud)
        assert np.allclose(out.points, [[1, 0, 0]])

    def test_90deg_z_rotation(self):
        # oracle: rotation matrix applied directly
        p = Pose(quat_from_axis_angle([0, 0, 1], math.radians(90)), [0, 0, 0])
        out = apply(p, LabeledPointCloud([[1, 0, 0]], [7]))
        assert np.allclose(out.points, (rotmat_z(90) @ [1, 0, 0]), atol=1e-12)
        assert np.allclose(out.points, [[0, 1, 0]], atol=1e-12)

    def test_normals_rotated_not_translated(self):
        p = Pose(quat_from_axis_angle([0, 0, 1], math.radians(90)), [5, 5, 5])
        cloud = LabeledPointCloud([[0, 0, 0]], [1], [[1, 0, 0]])
        out = apply(p, cloud)
        assert np.allclose(out.normals, [[0, 1, 0]], atol=1e-12)
        assert np.allclose(out.points, [[5, 5, 5]], atol=1e-12)

    def test_preserves_pairwise_distances(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pts = rng.uniform(-1, 1, (50, 3))
            cloud = LabeledPointCloud(pts, np.zeros(50, dtype=int))
            out = apply(random_pose(rng), cloud)
            d0 = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            d1 = np.linalg.norm(out.points[:, None] - out.points[None, :], axis=-1)
            assert np.max(np.abs(d0 - d1)) < 1e-9


# --- quaternion_angle / pose_error --------------------------------------------

class TestQuaternionAngle:
    def test_identical_quaternions(self):
        q = quat_from_axis_angle([1, 1, 0], 0.9)
        assert quaternion_angle(q, q) == 0.0

    def test_sign_flip_invariance(self):
        q = quat_from_axis_angle([1, 2, -1], 1.4)
        assert quaternion_angle(q, -q) == 0.0

    def test_identity_vs_90deg_z(self):
        q90 = quat_from_axis_angle([0, 0, 1], math.radians(90))
        # oracle: geodesic angle of the rotation matrices
        expected = geodesic_angle_deg(np.eye(3), rotmat_z(90))
        got = quaternion_angle([1, 0, 0, 0], q90)
        assert abs(got - expected) < 1e-9
        assert abs(got - 90.0) < 1e-9

    def test_matches_rotation_matrix_geodesic(self):
        rng = np.random.default_rng(6)
        qs = random_unit_quats(rng, 2000)
        for q1, q2 in zip(qs[::2], qs[1::2]):
            expected = geodesic_angle_deg(quat_to_matrix(q1), quat_to_matrix(q2))
            assert abs(quaternion_angle(q1, q2) - expected) < 1e-9

    def test_symmetry_and_triangle_inequality(self):
        rng = np.random.default_rng(7)
        qs = random_unit_quats(rng, 300)
        for a, b, c in zip(qs[::3], qs[1::3], qs[2::3]):
            assert abs(quaternion_angle(a, b) - quaternion_angle(b, a)) < 1e-9
            assert quaternion_angle(a, c) <= (
                quaternion_angle(a, b) + quaternion_angle(b, c) + 1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1), min_size=4, max_size=4),
           st.lists(st.floats(-1, 1), min_size=4, max_size=4))
    def test_range_property(self, a, b):
        qa, qb = np.array(a), np.array(b)
        na, nb = np.linalg.norm(qa), np.linalg.norm(qb)
        if na < 1e-3 or nb < 1e-3:
            return
        ang = quaternion_angle(qa / na, qb / nb)
        assert 0.0 <= ang <= 180.0


class TestPoseError:
    def test_identical_poses(self):
        p = Pose(quat_from_axis_angle([1, 0, 2], 0.5), [1, 2, 3])
        e = pose_error(p, p)
        assert e.translation_norm == 0.0 and e.angle == 0.0

    def test_345_translation(self):
        a = Pose.identity()
        b = Pose([1, 0, 0, 0], [0.003, 0.004, 0.0])
        assert abs(pose_error(a, b).translation_norm - 0.005) < 1e-15

    def test_10deg_arbitrary_axis(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            axis = rng.normal(size=3)
            truth = random_pose(rng)
            est = compose(truth, Pose(quat_from_axis_angle(axis, math.radians(10)), [0, 0, 0]))
            # oracle: geodesic angle of the two rotation matrices
            expected = geodesic_angle_deg(est.rotation_matrix(), truth.rotation_matrix())
            got = pose_error(est, truth).angle
            assert abs(got - expected) < 1e-9
            assert abs(got - 10.0) < 1e-9

    def test_invalid_fields_rejected(self):
        with pytest.raises(ValueError):
            PoseError(-1.0, 10.0)
        with pytest.raises(ValueError):
            PoseError(0.0, 200.0)


# --- crop_by_label -------------------------------------------------------------

class TestCropByLabel:
    def test_full_match(self):
        cloud = LabeledPointCloud(np.arange(30).reshape(10, 3), np.full(10, 3))
        out = crop_by_label(cloud, 3)
        assert np.array_equal(out.points, cloud.points)

    def test_no_match(self):
        cloud = LabeledPointCloud(np.arange(30).reshape(10, 3), np.full(10, 3))
        assert len(crop_by_label(cloud, 5)) == 0

    def test_mixed_count_against_bruteforce(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 5, 1000)
        labels[:412] = 2
        labels[412:] = rng.choice([0, 1, 3, 4], size=588)
        rng.shuffle(labels)
        cloud = LabeledPointCloud(rng.normal(size=(1000, 3)), labels)
        out = crop_by_label(cloud, 2)
        assert len(out) == sum(1 for v in labels if v == 2) == 412

    def test_partition_preserves_multiset(self):
        rng = np.random.default_rng(10)
        labels = rng.integers(0, 4, 500)
        pts = rng.normal(size=(500, 3))
        cloud = LabeledPointCloud(pts, labels)
        parts = [crop_by_label(cloud, v) for v in sorted(set(labels.tolist()))]
        merged = np.vstack([p.points for p in parts])
        assert sorted(map(tuple, merged)) == sorted(map(tuple, pts))

    def test_order_preserved(self):
        pts = np.arange(18).reshape(6, 3)
        cloud = LabeledPointCloud(pts, [1, 0, 1, 0, 1, 0])
        out = crop_by_label(cloud, 1)
        assert np.array_equal(out.points, pts[[0, 2, 4]])


# --- cloud validation ----------------------------------------------------------

class TestLabeledPointCloud:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LabeledPointCloud([[0, 0, 0]], [1, 2])

    def test_normal_norm_checked(self):
        with pytest.raises(ValueError):
            LabeledPointCloud([[0, 0, 0]], [1], [[2, 0, 0]])

    def test_negative_labels_rejected(self):
        with pytest.raises(ValueError):
            LabeledPointCloud([[0, 0, 0]], [-1])


# --- look_at --------------------------------------------------------------------

class TestLookAt:
    def test_forward_axis_points_at_target(self):
        p = look_at([1.0, 0.5, 0.25], [0, 0, 0])
        z = p.rotation_matrix()[:, 2]
        d = -np.array([1.0, 0.5, 0.25])
        assert np.allclose(z, d / np.linalg.norm(d), atol=1e-12)

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            eye = rng.uniform(-2, 2, 3)
            if np.linalg.norm(eye[:2]) < 0.1:
                continue
            R = look_at(eye, [0, 0, 0]).rotation_matrix()
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_parallel_up_hint_rejected(self):
        with pytest.raises(ValueError):
            look_at([0, 0, 2.0], [0, 0, 0], up_hint=(0, 0, 1))


# --- JSON ------------------------------------------------------------------------

def test_pose_json_roundtrip():
    p = Pose(quat_from_axis_angle([3, 1, 2], 1.1), [0.5, -0.25, 0.125])
    r = pose_from_dict(pose_to_dict(p))
    assert quaternion_angle(p.q, r.q) < 1e-12
    assert np.allclose(p.t, r.t)


def test_pose_json_shape_checked():
    with pytest.raises(ValueError):
        pose_from_dict({"q": [1, 0, 0, 0]})
