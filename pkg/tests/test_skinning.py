import math

import numpy as np
import pytest
import torch

from volrig.skinning import (BoneAffines, NearestVertexIndex, Pose, Skeleton,
                             SkinnedTemplate, SkinningError, axis_angle_to_quat,
                             bone_affines, blend, build_index,
                             forward_kinematics, inverse_warp, pose_mesh,
                             quat_mul, quat_normalize, quat_to_axis_angle,
                             quat_to_matrix)


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
                        dtype=torch.float64)


class TestQuaternions:
    def test_identity_matrix(self):
        q = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        assert torch.allclose(quat_to_matrix(q), torch.eye(3, dtype=torch.float64))

    def test_z_rotation_90(self):
        aa = torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64)
        r = quat_to_matrix(axis_angle_to_quat(aa))
        assert torch.allclose(r, rot_z(math.pi / 2), atol=1e-12)

    def test_mul_composes(self):
        gen = torch.Generator().manual_seed(0)
        a = quat_normalize(torch.randn(4, dtype=torch.float64, generator=gen))
        b = quat_normalize(torch.randn(4, dtype=torch.float64, generator=gen))
        assert torch.allclose(quat_to_matrix(quat_mul(a, b)),
                              quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)

    def test_axis_angle_round_trip(self):
        gen = torch.Generator().manual_seed(1)
        aa = torch.randn(10, 3, dtype=torch.float64, generator=gen)
        back = quat_to_axis_angle(axis_angle_to_quat(aa))
        assert torch.allclose(back, aa, atol=1e-9)

    def test_zero_angle_safe(self):
        q = axis_angle_to_quat(torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(q, torch.tensor([1.0, 0.0, 0.0, 0.0],
                                              dtype=torch.float64))


class TestPose:
    def test_non_unit_rejected(self):
        with pytest.raises(SkinningError):
            Pose(torch.tensor([[2.0, 0.0, 0.0, 0.0]]), torch.zeros(3))

    def test_identity(self):
        p = Pose.identity(3)
        assert p.bone_count == 3
        assert torch.allclose(p.axis_angle(), torch.zeros(3, 3, dtype=torch.float64))


class TestSkeleton:
    def test_root_must_be_first(self):
        with pytest.raises(SkinningError):
            Skeleton(np.array([0, -1]), torch.zeros(2, 3))

    def test_topological_order(self):
        with pytest.raises(SkinningError):
            Skeleton(np.array([-1, 2, 1]), torch.zeros(3, 3))


class TestForwardKinematics:
    def test_identity_pose_accumulates_offsets(self, two_bone):
        fk = forward_kinematics(two_bone, Pose.identity(2))
        assert torch.allclose(fk.linear, torch.eye(3, dtype=torch.float64).expand(2, 3, 3))
        assert torch.allclose(fk.translation,
                              torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
                                           dtype=torch.float64))

    def test_two_bone_90deg_hand_case(self, two_bone):
        """Root rotates 90 deg about Z: bone 1's joint lands at (0, 1, 0)."""
        aa = torch.tensor([[0.0, 0.0, math.pi / 2], [0.0, 0.0, 0.0]],
                          dtype=torch.float64)
        fk = forward_kinematics(two_bone, Pose.from_axis_angle(aa, torch.zeros(3)))
        assert torch.allclose(fk.translation[1],
                              torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64),
                              atol=1e-12)
        assert torch.allclose(fk.linear[1], rot_z(math.pi / 2), atol=1e-12)

    def test_child_90deg_hand_case(self, two_bone):
        """Child rotates 90 deg about Z: its frame rotates, joint stays at (1,0,0);
        a point at local +x maps to (1, 1, 0) hand-computed."""
        aa = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, math.pi / 2]],
                          dtype=torch.float64)
        fk = forward_kinematics(two_bone, Pose.from_axis_angle(aa, torch.zeros(3)))
        assert torch.allclose(fk.translation[1],
                              torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64),
                              atol=1e-12)
        p = fk.linear[1] @ torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64) \
            + fk.translation[1]
        assert torch.allclose(p, torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64),
                              atol=1e-12)

    def test_root_translation(self, two_bone):
        t = torch.tensor([0.5, -0.25, 2.0], dtype=torch.float64)
        fk = forward_kinematics(two_bone, Pose(Pose.identity(2).rotations, t))
        assert torch.allclose(fk.translation[0], t)
        assert torch.allclose(fk.translation[1],
                              t + torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64))


class TestBoneAffines:
    def test_identity_at_rest_pose(self, two_bone):
        aff = bone_affines(two_bone, two_bone.rest_pose)
        assert torch.allclose(aff.linear, torch.eye(3, dtype=torch.float64).expand(2, 3, 3),
                              atol=1e-12)
        assert torch.allclose(aff.translation, torch.zeros(2, 3, dtype=torch.float64),
                              atol=1e-12)

    def test_nonidentity_rest_pose(self):
        """A_b must still be identity when theta equals a bent rest pose."""
        rest = Pose.from_axis_angle(
            torch.tensor([[0.0, 0.0, 0.3], [0.2, 0.0, 0.0]], dtype=torch.float64),
            torch.zeros(3, dtype=torch.float64))
        skel = Skeleton(np.array([-1, 0]),
                        torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
                                     dtype=torch.float64), rest)
        aff = bone_affines(skel, rest)
        assert torch.allclose(aff.linear, torch.eye(3, dtype=torch.float64).expand(2, 3, 3),
                              atol=1e-12)
        assert torch.allclose(aff.translation, torch.zeros(2, 3, dtype=torch.float64),
                              atol=1e-12)

    def test_rigid_point_transport(self, two_bone):
        """A_1 maps a canonical point rigidly attached to bone 1 to its posed
        location computed independently through FK."""
        aa = torch.tensor([[0.0, 0.0, 0.4], [0.0, 0.0, -0.9]], dtype=torch.float64)
        pose = Pose.from_axis_angle(aa, torch.tensor([0.1, 0.2, 0.3],
                                                     dtype=torch.float64))
        aff = bone_affines(two_bone, pose)
        # canonical point expressed in bone 1's rest frame: local = p - joint0
        local = torch.tensor([0.3, 0.1, -0.2], dtype=torch.float64)
        canonical = local + torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        fk = forward_kinematics(two_bone, pose)
        expected = fk.linear[1] @ local + fk.translation[1]
        got = aff.linear[1] @ canonical + aff.translation[1]
        assert torch.allclose(got, expected, atol=1e-12)


class TestBlend:
    def test_convexity(self, two_bone):
        aa = torch.tensor([[0.0, 0.0, 0.7], [0.0, 1.1, 0.0]], dtype=torch.float64)
        aff = bone_affines(two_bone, Pose.from_axis_angle(aa, torch.zeros(3)))
        w = torch.tensor([0.25, 0.75], dtype=torch.float64)
        m = blend(w, aff)
        expected = 0.25 * aff.matrix34()[0] + 0.75 * aff.matrix34()[1]
        assert torch.allclose(m, expected, atol=1e-12)

    def test_one_hot_recovers_bone(self, two_bone):
        aa = torch.tensor([[0.0, 0.0, 0.7], [0.0, 1.1, 0.0]], dtype=torch.float64)
        aff = bone_affines(two_bone, Pose.from_axis_angle(aa, torch.zeros(3)))
        m = blend(torch.tensor([0.0, 1.0], dtype=torch.float64), aff)
        assert torch.allclose(m, aff.matrix34()[1], atol=1e-12)


def make_template(two_bone, n=40, seed=3):
    gen = torch.Generator().manual_seed(seed)
    verts = torch.rand(n, 3, dtype=torch.float64, generator=gen) \
        * torch.tensor([2.0, 0.4, 0.4], dtype=torch.float64) \
        - torch.tensor([0.0, 0.2, 0.2], dtype=torch.float64)
    # weight toward the nearer bone, rigid at the extremes
    t = (verts[:, 0] / 2.0).clamp(0, 1)
    w1 = ((t - 0.4) / 0.2).clamp(0.0, 1.0)
    weights = torch.stack([1 - w1, w1], dim=-1)
    bone_idx = np.tile(np.array([0, 1, 0, 0]), (n, 1))
    weights4 = torch.cat([weights, torch.zeros(n, 2, dtype=torch.float64)], dim=-1)
    faces = np.zeros((0, 3), dtype=np.int64)
    return SkinnedTemplate(verts, faces, bone_idx, weights4)


class TestPoseMeshAndInverseWarp:
    def test_identity_pose_round_trip(self, two_bone):
        tmpl = make_template(two_bone)
        aff = bone_affines(two_bone, Pose.identity(2))
        posed = pose_mesh(tmpl, aff)
        assert torch.allclose(posed.vertices, tmpl.vertices, atol=1e-12)
        assert not posed.singular.any()

    def test_vertex_round_trip_exact(self, two_bone):
        """Posed vertices inverse-warp back to canonical within 1e-5."""
        tmpl = make_template(two_bone)
        aa = torch.tensor([[0.0, 0.0, 0.3], [0.0, 0.0, 1.2]], dtype=torch.float64)
        aff = bone_affines(two_bone, Pose.from_axis_angle(aa, torch.zeros(3)))
        posed = pose_mesh(tmpl, aff)
        index = build_index(posed.vertices)
        canon, valid, idx = inverse_warp(posed.vertices, posed, index, tau=1e-6)
        assert valid.all()
        assert (idx.numpy() == np.arange(tmpl.vertices.shape[0])).all()
        assert (canon - tmpl.vertices).abs().max().item() < 1e-5

    def test_tau_rejects_far_points(self, two_bone):
        tmpl = make_template(two_bone)
        aff = bone_affines(two_bone, Pose.identity(2))
        posed = pose_mesh(tmpl, aff)
        index = build_index(posed.vertices)
        far = torch.tensor([[50.0, 50.0, 50.0]], dtype=torch.float64)
        _, valid, _ = inverse_warp(far, posed, index, tau=0.5)
        assert not valid.any()

    def test_weight_rows_must_sum_to_one(self, two_bone):
        with pytest.raises(SkinningError):
            SkinnedTemplate(torch.zeros(1, 3), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((1, 4), dtype=np.int64),
                            torch.tensor([[0.5, 0.1, 0.0, 0.0]]))

    def test_default_tau_scale(self, two_bone):
        tmpl = make_template(two_bone)
        assert tmpl.default_tau() == pytest.approx(0.1 * tmpl.bounding_diagonal())


class TestNearestVertexIndex:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(200, 3))
        queries = rng.normal(size=(500, 3))
        index = NearestVertexIndex(pts)
        idx, dist = index.query(queries)
        d2 = ((queries[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        brute = d2.argmin(axis=1)
        assert (idx == brute).all()
        assert np.allclose(dist, np.sqrt(d2.min(axis=1)))

    def test_tie_breaks_to_lowest_index(self):
        # two coincident vertices: the lower index must win
        pts = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        index = NearestVertexIndex(pts)
        idx, _ = index.query(np.array([[0.01, 0.0, 0.0]]))
        assert idx[0] == 1

    def test_symmetric_tie(self):
        pts = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        idx, _ = NearestVertexIndex(pts).query(np.array([[0.0, 0.0, 0.0]]))
        assert idx[0] == 0

    def test_empty_rejected(self):
        with pytest.raises(SkinningError):
            NearestVertexIndex(np.zeros((0, 3)))


class TestSingularBlend:
    def test_opposite_rotations_fall_back_rigidly(self):
        """Two bones rotated 180 deg apart about Z give a singular blend at
        weight 0.5; the inverse must fall back to the top-weight bone."""
        skel = Skeleton(np.array([-1, -1 + 1]),
                        torch.zeros(2, 3, dtype=torch.float64))
        aa = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, math.pi]],
                          dtype=torch.float64)
        aff = bone_affines(skel, Pose.from_axis_angle(aa, torch.zeros(3)))
        tmpl = SkinnedTemplate(
            torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64),
            np.zeros((0, 3), dtype=np.int64),
            np.array([[0, 1, 0, 0]]),
            torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=torch.float64))
        posed = pose_mesh(tmpl, aff)
        assert posed.singular.all()
        # the fallback inverse is finite and rigid
        assert torch.isfinite(posed.inverse_affines).all()
        inv_lin = posed.inverse_affines[0, :, :3]
        assert torch.allclose(inv_lin @ inv_lin.T, torch.eye(3, dtype=torch.float64),
                              atol=1e-9)
