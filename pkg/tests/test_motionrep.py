"""Representation round trips, part splitting, and pose-error metrics."""

import numpy as np
import pytest

from motok.motionrep import (MotionError, RawMotion, RootAnchor, accel_error,
                             default_skeleton, merge_parts, motion_layout,
                             mpjpe, pa_mpjpe, repr_decode, repr_encode,
                             root_anchor, split_parts)

rng = np.random.default_rng(4242)
SKEL = default_skeleton()


def smooth_random_motion(L=20, seed=0, travel=True):
    """Low-frequency random global trajectories for every joint."""
    r = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, L)[:, None, None]
    rest = r.normal(scale=0.3, size=(1, SKEL.joint_count, 3))
    rest[0, :, 1] += 1.0
    wobble = (0.05 * np.sin(2 * np.pi * (t * r.uniform(0.5, 2.0)
                                         + r.random((1, SKEL.joint_count, 3)))))
    pos = rest + wobble
    if travel:
        heading = r.uniform(0, 2 * np.pi)
        vel = np.array([np.sin(heading), 0.0, np.cos(heading)]) * 0.08
        pos = pos + t * vel * L
    # keep the hip axis well-defined
    pos[:, SKEL.left_hip, 0] = pos[:, 0, 0] + 0.12
    pos[:, SKEL.right_hip, 0] = pos[:, 0, 0] - 0.12
    pos[:, SKEL.left_hip, 2] = pos[:, 0, 2]
    pos[:, SKEL.right_hip, 2] = pos[:, 0, 2]
    face = r.normal(scale=0.1, size=(L, 50))
    return RawMotion(pos, face)


class TestLayout:
    def test_default_dimensions(self):
        lay = motion_layout(SKEL)
        assert lay.d == 4 + 3 * 51 + 3 * 52 + 50 == 363
        assert lay.d_b == 4 + 3 * 21 + 3 * 22 == 133
        assert lay.d_h == 3 * 30 + 3 * 30 == 180
        assert lay.d_f == 50
        assert lay.d == lay.d_b + lay.d_h + lay.d_f

    def test_columns_partition(self):
        lay = motion_layout(SKEL)
        all_cols = np.concatenate([lay.body_cols, lay.hand_cols, lay.face_cols])
        assert sorted(all_cols) == list(range(lay.d))


class TestEncode:
    def test_static_pose_zero_velocities(self):
        pos = np.tile(smooth_random_motion(2, seed=1).positions[:1], (10, 1, 1))
        raw = RawMotion(pos, np.zeros((10, 50)))
        rep = repr_encode(raw, SKEL)
        np.testing.assert_allclose(rep.frames[:, 0], 0.0, atol=1e-12)   # yaw vel
        np.testing.assert_allclose(rep.frames[:, 1:3], 0.0, atol=1e-12)  # planar vel
        lay = rep.layout
        np.testing.assert_allclose(
            rep.frames[:, lay.jv_offset:lay.face_offset], 0.0, atol=1e-12)

    def test_pure_x_translation(self):
        base = smooth_random_motion(2, seed=2).positions[:1]
        L = 8
        pos = np.tile(base, (L, 1, 1)).astype(float)
        pos[:, :, 0] += 0.1 * np.arange(L)[:, None]
        raw = RawMotion(pos, np.zeros((L, 50)))
        rep = repr_encode(raw, SKEL)
        # facing +Z (yaw 0), so global +X is local +X
        np.testing.assert_allclose(rep.frames[:, 1], 0.1, atol=1e-12)
        np.testing.assert_allclose(rep.frames[:, 2], 0.0, atol=1e-12)
        np.testing.assert_allclose(rep.frames[:, 0], 0.0, atol=1e-12)

    def test_round_trip_within_tolerance(self):
        for seed in range(4):
            raw = smooth_random_motion(24, seed=seed)
            rep = repr_encode(raw, SKEL)
            back = repr_decode(rep, SKEL, root_anchor(raw, SKEL))
            err = np.abs(back.positions - raw.positions).max()
            assert err < 1e-4, err
            np.testing.assert_array_equal(back.face, raw.face)

    def test_translation_changes_only_anchor(self):
        raw = smooth_random_motion(16, seed=5)
        shifted = RawMotion(raw.positions + np.array([1.5, 0.0, -2.0]), raw.face)
        a = repr_encode(raw, SKEL).frames
        b = repr_encode(shifted, SKEL).frames
        # the height channel moves with a Y shift only; XZ shifts are invisible
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_velocity_toggle_zero_fills(self):
        raw = smooth_random_motion(12, seed=6)
        rep = repr_encode(raw, SKEL, include_velocity=False)
        assert not rep.velocity_included
        lay = rep.layout
        assert (rep.frames[:, lay.jv_offset:lay.face_offset] == 0).all()

    def test_degenerate_hips_error_names_frame(self):
        raw = smooth_random_motion(6, seed=7)
        pos = raw.positions.copy()
        pos[3, SKEL.left_hip] = pos[3, SKEL.right_hip]
        with pytest.raises(MotionError, match="frame 3"):
            repr_encode(RawMotion(pos, raw.face), SKEL)

    def test_too_short(self):
        raw = smooth_random_motion(4, seed=8)
        with pytest.raises(MotionError):
            repr_encode(RawMotion(raw.positions[:1], raw.face[:1]), SKEL)


class TestDecode:
    def test_zero_velocity_repr_constant(self):
        lay = motion_layout(SKEL)
        frames = np.zeros((5, lay.d))
        frames[:, 3] = 0.9
        frames[:, lay.jp_offset:lay.jv_offset] = rng.normal(
            scale=0.2, size=(1, 3 * 51))
        from motok.motionrep import MotionRepr
        raw = repr_decode(MotionRepr(frames, lay), SKEL, RootAnchor())
        for t in range(1, 5):
            np.testing.assert_allclose(raw.positions[t], raw.positions[0], atol=1e-12)

    def test_decode_deterministic(self):
        raw = smooth_random_motion(10, seed=9)
        rep = repr_encode(raw, SKEL)
        a = repr_decode(rep, SKEL).positions
        b = repr_decode(rep, SKEL).positions
        assert (a == b).all()

    def test_column_mismatch(self):
        from motok.motionrep import MotionRepr
        lay = motion_layout(SKEL)
        rep = MotionRepr(np.zeros((4, lay.d)), lay)
        with pytest.raises(MotionError):
            repr_decode(rep, Skeleton_with_fewer_joints())


def Skeleton_with_fewer_joints():
    from motok.motionrep import Skeleton
    return Skeleton(joint_count=4, parents=(-1, 0, 0, 1),
                    body_joints=(0, 1, 2), hand_joints=(3,))


class TestParts:
    def test_round_trip_bit_exact(self):
        raw = smooth_random_motion(14, seed=10)
        rep = repr_encode(raw, SKEL)
        b, h, f = split_parts(rep)
        merged = merge_parts(b, h, f, rep.layout)
        assert (merged.frames == rep.frames).all()

    def test_widths_sum(self):
        rep = repr_encode(smooth_random_motion(8, seed=11), SKEL)
        b, h, f = split_parts(rep)
        assert b.shape[1] + h.shape[1] + f.shape[1] == rep.layout.d

    def test_bad_widths_rejected(self):
        rep = repr_encode(smooth_random_motion(8, seed=12), SKEL)
        b, h, f = split_parts(rep)
        with pytest.raises(MotionError):
            merge_parts(b[:, :-1], h, f, rep.layout)
        with pytest.raises(MotionError):
            merge_parts(b[:-1], h, f, rep.layout)


class TestPoseMetrics:
    def test_mpjpe_zero_on_identity(self):
        raw = smooth_random_motion(10, seed=13)
        assert mpjpe(raw, raw, SKEL) == 0.0

    def test_mpjpe_uniform_offset(self):
        raw = smooth_random_motion(10, seed=14)
        off = raw.positions + np.array([0.0, 0.01, 0.0])  # 10 mm up
        shifted = RawMotion(off, raw.face)
        np.testing.assert_allclose(mpjpe(shifted, raw, SKEL), 10.0, rtol=1e-9)

    def test_mpjpe_matches_double_loop(self):
        a = smooth_random_motion(6, seed=15)
        b = smooth_random_motion(6, seed=16)
        expected = 0.0
        for t in range(6):
            for j in range(SKEL.joint_count):
                expected += np.linalg.norm(a.positions[t, j] - b.positions[t, j])
        expected = expected / (6 * SKEL.joint_count) * 1000.0
        np.testing.assert_allclose(mpjpe(a, b, SKEL), expected, rtol=1e-12)

    def test_mpjpe_parts(self):
        a = smooth_random_motion(6, seed=17)
        b = RawMotion(a.positions.copy(), a.face)
        b.positions[:, 22:] += 0.05  # hands only
        assert mpjpe(b, a, SKEL, part="body") == 0.0
        assert mpjpe(b, a, SKEL, part="hand") > 0.0

    def test_pa_mpjpe_invariant_under_similarity(self):
        raw = smooth_random_motion(8, seed=18)
        theta = 1.1
        rot = np.array([[np.cos(theta), 0, np.sin(theta)],
                        [0, 1, 0],
                        [-np.sin(theta), 0, np.cos(theta)]])
        transformed = RawMotion(
            1.3 * raw.positions @ rot.T + np.array([0.4, -0.2, 2.0]), raw.face)
        assert pa_mpjpe(transformed, raw, SKEL) < 1e-6
        assert pa_mpjpe(raw, raw, SKEL) < 1e-12

    def test_pa_mpjpe_not_above_mpjpe(self):
        a = smooth_random_motion(6, seed=19)
        b = smooth_random_motion(6, seed=20)
        assert pa_mpjpe(a, b, SKEL) <= mpjpe(a, b, SKEL) + 1e-9

    def test_pa_mpjpe_degenerate_frame(self):
        a = smooth_random_motion(4, seed=21)
        collapsed = RawMotion(np.zeros_like(a.positions) + 0.5, a.face)
        with pytest.raises(MotionError, match="coincident"):
            pa_mpjpe(collapsed, a, SKEL)

    def test_accel_identical_zero(self):
        raw = smooth_random_motion(8, seed=22)
        assert accel_error(raw, raw, SKEL) == 0.0

    def test_accel_constant_offset_cancels(self):
        raw = smooth_random_motion(8, seed=23)
        shifted = RawMotion(raw.positions + np.array([0.3, 0.1, -0.2]), raw.face)
        np.testing.assert_allclose(accel_error(shifted, raw, SKEL), 0.0, atol=1e-12)

    def test_accel_matches_brute_force(self):
        a = smooth_random_motion(7, seed=24)
        b = smooth_random_motion(7, seed=25)
        total = 0.0
        count = 0
        for t in range(1, 6):
            for j in range(SKEL.joint_count):
                aa = a.positions[t + 1, j] - 2 * a.positions[t, j] + a.positions[t - 1, j]
                bb = b.positions[t + 1, j] - 2 * b.positions[t, j] + b.positions[t - 1, j]
                total += np.linalg.norm(aa - bb)
                count += 1
        np.testing.assert_allclose(accel_error(a, b, SKEL),
                                   total / count * 1000.0, rtol=1e-12)

    def test_accel_too_short(self):
        raw = smooth_random_motion(4, seed=26)
        short = RawMotion(raw.positions[:2], raw.face[:2])
        with pytest.raises(MotionError):
            accel_error(short, short, SKEL)

    def test_shape_mismatch(self):
        a = smooth_random_motion(6, seed=27)
        b = smooth_random_motion(8, seed=28)
        for fn in (mpjpe, pa_mpjpe, accel_error):
            with pytest.raises(MotionError):
                fn(a, b, SKEL)
