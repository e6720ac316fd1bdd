import numpy as np
import pytest

from latentcam.pose_adapter import (
    build_pose_mlp_weights,
    encode_pose,
    pose_embed,
    source_pose_embed,
    target_pose_embed,
)
from latentcam.rng import Rng
from latentcam.scene_synth import CameraPose, Intrinsics, Trajectory, look_at, make_trajectory
from latentcam.tensor_engine import ParameterSet, Tensor, finite_diff_check, matmul

INTR = Intrinsics.default((32, 32))
IDENTITY = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0, 0, 0, 0])


def make_mlp(seed=0, D=16):
    params = ParameterSet()
    w = build_pose_mlp_weights("source", D, params, Rng(seed).split("pose"))
    return params, w


class TestEncodePose:
    def test_identity_exact(self):
        pose = look_at([3.0, 2.0, 1.0], [0.0, 1.0, 0.0])
        out = encode_pose(pose, pose)
        assert np.array_equal(out, IDENTITY)

    def test_pure_translation(self):
        ref = CameraPose(np.eye(3), np.array([0.0, 0.0, 0.0]))
        pose = CameraPose(np.eye(3), np.array([0.0, 0.0, 1.0]))
        out = encode_pose(pose, ref)
        assert np.allclose(out[:9].reshape(3, 3), np.eye(3), atol=1e-15)
        assert np.allclose(out[9:], [0.0, 0.0, 1.0], atol=1e-15)

    def test_composition_group_law(self):
        a = look_at([3.0, 2.0, 1.0], [0.0, 1.0, 0.0])
        b = look_at([-2.0, 1.5, 2.5], [0.2, 0.8, 0.1])
        c = look_at([1.0, 3.0, -2.0], [0.0, 1.0, 0.2])
        ab = encode_pose(a, b)
        bc = encode_pose(b, c)
        ac = encode_pose(a, c)
        r_ab, t_ab = ab[:9].reshape(3, 3), ab[9:]
        r_bc, t_bc = bc[:9].reshape(3, 3), bc[9:]
        composed_r = r_bc @ r_ab
        composed_t = r_bc @ t_ab + t_bc
        assert np.max(np.abs(composed_r - ac[:9].reshape(3, 3))) < 1e-9
        assert np.max(np.abs(composed_t - ac[9:])) < 1e-9

    def test_embedded_rotation_orthonormal(self):
        a = look_at([3.0, 2.0, 1.0], [0.0, 1.0, 0.0])
        b = look_at([-1.0, 2.5, 3.0], [0.1, 0.9, 0.0])
        r = encode_pose(a, b)[:9].reshape(3, 3)
        assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-6
        assert abs(np.linalg.det(r) - 1.0) < 1e-6


class TestPoseEmbed:
    def test_zero_weights_zero_embeddings(self):
        params, w = make_mlp()
        for p in params:
            p.data[...] = 0.0
        traj = make_trajectory(1, "orbit", 6, INTR)
        out = source_pose_embed(traj, w)
        assert np.all(out.data == 0.0)

    def test_identical_poses_identical_rows(self):
        _, w = make_mlp(seed=2)
        pose = look_at([4.0, 2.0, 0.0], [0, 1, 0])
        other = look_at([3.9, 2.0, 0.4], [0, 1, 0])
        traj = Trajectory(poses=[pose, other, pose], intrinsics=INTR, kind="smooth_random")
        out = source_pose_embed(traj, w).data
        assert np.array_equal(out[0], out[2])

    def test_source_frame0_is_identity_row(self):
        _, w = make_mlp(seed=3)
        traj = make_trajectory(4, "smooth_random", 5, INTR)
        out = source_pose_embed(traj, w).data
        # frame 0 embeds the exact identity vector
        ident = pose_embed(
            Trajectory(poses=[traj.poses[0], traj.poses[0]], intrinsics=INTR, kind="smooth_random"),
            w, traj.poses[0]
        ).data[0]
        assert np.array_equal(out[0], ident)

    def test_swap_rows_swaps_embeddings(self):
        _, w = make_mlp(seed=5)
        src = make_trajectory(6, "orbit", 5, INTR)
        tgt = make_trajectory(7, "smooth_random", 5, INTR)
        ref = src.poses[0]
        out = target_pose_embed(tgt, w, ref).data
        swapped = Trajectory(
            poses=[tgt.poses[0], tgt.poses[3], tgt.poses[2], tgt.poses[1], tgt.poses[4]],
            intrinsics=INTR, kind="smooth_random",
        )
        out_sw = target_pose_embed(swapped, w, ref).data
        assert np.array_equal(out_sw[1], out[3])
        assert np.array_equal(out_sw[3], out[1])
        assert np.array_equal(out_sw[0], out[0])

    def test_locality_single_frame_change(self):
        _, w = make_mlp(seed=8)
        src = make_trajectory(9, "orbit", 6, INTR)
        tgt = make_trajectory(10, "smooth_random", 6, INTR)
        ref = src.poses[0]
        base = target_pose_embed(tgt, w, ref).data
        poses = list(tgt.poses)
        poses[3] = look_at(poses[3].translation + np.array([0.05, 0.0, 0.02]),
                           np.array([0.0, 1.0, 0.0]))
        bumped = Trajectory(poses=poses, intrinsics=INTR, kind="smooth_random")
        out = target_pose_embed(bumped, w, ref).data
        diff_rows = np.nonzero(np.any(out != base, axis=1))[0]
        assert np.array_equal(diff_rows, [3])

    def test_gradients(self):
        params, w = make_mlp(seed=11, D=8)
        traj = make_trajectory(12, "smooth_random", 4, INTR)
        probe = Tensor(Rng(13).normal((4, 8)))

        def f_w1(w1):
            from latentcam.pose_adapter import PoseMlpWeights
            ww = PoseMlpWeights(w1=w1, b1=w.b1, w2=w.w2, b2=w.b2)
            return (source_pose_embed(traj, ww) * probe).sum()

        assert finite_diff_check(f_w1, Tensor(w.w1.data.copy()), eps=1e-5) < 1e-4

        def f_w2(w2):
            from latentcam.pose_adapter import PoseMlpWeights
            ww = PoseMlpWeights(w1=w.w1, b1=w.b1, w2=w2, b2=w.b2)
            return (source_pose_embed(traj, ww) * probe).sum()

        assert finite_diff_check(f_w2, Tensor(w.w2.data.copy()), eps=1e-5) < 1e-4


class TestRigidInvariance:
    def test_bitwise_for_exact_transforms(self):
        # axis reflections (no permutation, no shift) round-trip float-exactly:
        # every product term keeps its magnitude and summation order
        q = np.diag([1.0, -1.0, -1.0])
        src = make_trajectory(20, "orbit", 5, INTR)
        tgt = make_trajectory(21, "smooth_random", 5, INTR)
        ref = src.poses[0]

        def apply(traj):
            return Trajectory(
                poses=[CameraPose(q @ p.rotation, q @ p.translation) for p in traj.poses],
                intrinsics=INTR, kind=traj.kind,
            )

        before = [encode_pose(p, ref) for p in tgt.poses]
        ref2 = apply(src).poses[0]
        after = [encode_pose(p, ref2) for p in apply(tgt).poses]
        for x, y in zip(before, after):
            assert np.array_equal(x, y)

    def test_generic_transform_close(self):
        q = look_at([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]).rotation
        shift = np.array([0.3, 0.7, -0.2])
        src = make_trajectory(22, "orbit", 5, INTR)
        ref = src.poses[0]

        before = [encode_pose(p, ref) for p in src.poses]
        moved = [CameraPose(q @ p.rotation, q @ p.translation + shift) for p in src.poses]
        after = [encode_pose(p, moved[0]) for p in moved]
        for x, y in zip(before, after):
            assert np.max(np.abs(x - y)) < 1e-12
