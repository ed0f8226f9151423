"""Whole-body motion feature representation and pose-error metrics.

Per-frame layout: yaw angular velocity (1), root-local planar velocity (2),
root height (1), root-local joint positions for every non-root joint (3(N-1)),
root-local joint velocities for every joint (3N), face coefficients (50).
The Y axis points up; yaw 0 faces +Z. Velocities are forward differences in
the frame's own root-local coordinates; the final frame repeats the previous
difference so all L rows are populated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FACE_DIM = 50


class MotionError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    joint_count: int
    parents: tuple
    body_joints: tuple
    hand_joints: tuple
    frame_rate: float = 30.0
    left_hip: int = 1
    right_hip: int = 2

    def __post_init__(self):
        body, hand = set(self.body_joints), set(self.hand_joints)
        if body & hand:
            raise MotionError("body and hand joint sets overlap")
        if body | hand != set(range(self.joint_count)):
            raise MotionError("body and hand sets must cover all joints")
        if 0 not in body:
            raise MotionError("joint 0 (root) must be a body joint")
        if len(self.parents) != self.joint_count or self.parents[0] != -1:
            raise MotionError("parents must form a tree rooted at joint 0")


@dataclass
class RawMotion:
    """Global joint positions (L, N, 3) in meters plus face coefficients (L, 50)."""
    positions: np.ndarray
    face: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.face = np.asarray(self.face, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise MotionError(f"positions must be (L, N, 3), got {self.positions.shape}")
        if self.face.shape != (self.positions.shape[0], FACE_DIM):
            raise MotionError(f"face must be (L, {FACE_DIM}), got {self.face.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise MotionError("positions contain non-finite values")

    @property
    def length(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class MotionLayout:
    """Column bookkeeping derived solely from a Skeleton."""
    n_joints: int
    d: int
    d_b: int
    d_h: int
    d_f: int
    body_cols: np.ndarray
    hand_cols: np.ndarray
    face_cols: np.ndarray
    jp_offset: int = field(default=4)

    @property
    def jv_offset(self) -> int:
        return 4 + 3 * (self.n_joints - 1)

    @property
    def face_offset(self) -> int:
        return self.jv_offset + 3 * self.n_joints


def motion_layout(skel: Skeleton) -> MotionLayout:
    n = skel.joint_count
    d = 4 + 3 * (n - 1) + 3 * n + FACE_DIM
    jp_off = 4
    jv_off = jp_off + 3 * (n - 1)
    face_off = jv_off + 3 * n

    def jp_cols(j: int) -> list[int]:
        # root has no jp entry; joint j>0 occupies slot j-1
        return list(range(jp_off + 3 * (j - 1), jp_off + 3 * j))

    def jv_cols(j: int) -> list[int]:
        return list(range(jv_off + 3 * j, jv_off + 3 * (j + 1)))

    body_cols = [0, 1, 2, 3]
    for j in sorted(skel.body_joints):
        if j != 0:
            body_cols += jp_cols(j)
        body_cols += jv_cols(j)
    hand_cols = []
    for j in sorted(skel.hand_joints):
        hand_cols += jp_cols(j)
        hand_cols += jv_cols(j)
    face_cols = list(range(face_off, face_off + FACE_DIM))

    layout = MotionLayout(
        n_joints=n, d=d,
        d_b=len(body_cols), d_h=len(hand_cols), d_f=FACE_DIM,
        body_cols=np.array(body_cols), hand_cols=np.array(hand_cols),
        face_cols=np.array(face_cols))
    assert layout.d_b + layout.d_h + layout.d_f == d
    return layout


@dataclass
class MotionRepr:
    frames: np.ndarray           # (L, d)
    layout: MotionLayout
    velocity_included: bool = True

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.layout.d:
            raise MotionError(
                f"frames must be (L, {self.layout.d}), got {self.frames.shape}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class RootAnchor:
    """Initial root pose used to re-integrate a decoded trajectory."""
    position: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0


def default_skeleton(frame_rate: float = 30.0) -> Skeleton:
    """Desk-scale default: 22 body joints plus 15 joints per hand (52 total).

    Body follows the usual pelvis/spine/limb tree; each hand hangs five
    3-joint finger chains off its wrist (left wrist 20, right wrist 21).
    """
    parents = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
               16, 17, 18, 19]
    for wrist in (20, 21):
        for _ in range(5):            # five fingers
            parents.append(wrist)
            parents.append(len(parents) - 1)
            parents.append(len(parents) - 1)
    return Skeleton(
        joint_count=52,
        parents=tuple(parents),
        body_joints=tuple(range(22)),
        hand_joints=tuple(range(22, 52)),
        frame_rate=frame_rate,
    )


def _yaw_rotation(yaw: np.ndarray) -> np.ndarray:
    """(T,) yaw -> (T, 3, 3) rotation about Y mapping local to global;
    local +Z maps to the facing direction (sin yaw, 0, cos yaw)."""
    c, s = np.cos(yaw), np.sin(yaw)
    zero, one = np.zeros_like(c), np.ones_like(c)
    rot = np.stack([
        np.stack([c, zero, s], axis=-1),
        np.stack([zero, one, zero], axis=-1),
        np.stack([-s, zero, c], axis=-1),
    ], axis=-2)
    return rot


def extract_yaw(raw: RawMotion, skel: Skeleton) -> np.ndarray:
    """Per-frame heading from the hip-to-hip axis projected onto the ground."""
    across = raw.positions[:, skel.left_hip] - raw.positions[:, skel.right_hip]
    facing = np.stack([-across[:, 2], across[:, 0]], axis=1)  # cross(across, up) in XZ
    norms = np.linalg.norm(facing, axis=1)
    bad = np.nonzero(norms < 1e-8)[0]
    if bad.size:
        raise MotionError(f"degenerate facing direction (zero-length hip vector) "
                          f"at frame {bad[0]}")
    facing /= norms[:, None]
    return np.unwrap(np.arctan2(facing[:, 0], facing[:, 1]))


def root_anchor(raw: RawMotion, skel: Skeleton) -> RootAnchor:
    yaw0 = float(extract_yaw(raw, skel)[0])
    p0 = raw.positions[0, 0]
    return RootAnchor(position=(float(p0[0]), float(p0[1]), float(p0[2])), yaw=yaw0)


def repr_encode(raw: RawMotion, skel: Skeleton,
                include_velocity: bool = True) -> MotionRepr:
    L, N = raw.positions.shape[:2]
    if N != skel.joint_count:
        raise MotionError(f"raw has {N} joints, skeleton declares {skel.joint_count}")
    if L < 2:
        raise MotionError("need at least 2 frames for velocity channels")
    layout = motion_layout(skel)
    pos = raw.positions
    yaw = extract_yaw(raw, skel)
    root = pos[:, 0]

    inv_rot = _yaw_rotation(-yaw)                       # global -> root-local

    out = np.zeros((L, layout.d))
    dyaw = np.diff(yaw)
    out[:-1, 0] = dyaw
    out[-1, 0] = dyaw[-1]

    droot = np.diff(root, axis=0)                       # (L-1, 3) global
    local_droot = np.einsum("tij,tj->ti", inv_rot[:-1], droot)
    out[:-1, 1] = local_droot[:, 0]
    out[:-1, 2] = local_droot[:, 2]
    out[-1, 1:3] = out[-2, 1:3]
    out[:, 3] = root[:, 1]

    rel = pos[:, 1:] - root[:, None, :]                 # (L, N-1, 3)
    local_rel = np.einsum("tij,tnj->tni", inv_rot, rel)
    out[:, layout.jp_offset:layout.jv_offset] = local_rel.reshape(L, -1)

    if include_velocity:
        dpos = np.diff(pos, axis=0)                     # (L-1, N, 3)
        local_v = np.einsum("tij,tnj->tni", inv_rot[:-1], dpos)
        jv = np.concatenate([local_v, local_v[-1:]], axis=0)
        out[:, layout.jv_offset:layout.face_offset] = jv.reshape(L, -1)

    out[:, layout.face_offset:] = raw.face
    return MotionRepr(out, layout, velocity_included=include_velocity)


def repr_decode(repr_: MotionRepr, skel: Skeleton,
                anchor: RootAnchor = RootAnchor()) -> RawMotion:
    layout = motion_layout(skel)
    if repr_.frames.shape[1] != layout.d:
        raise MotionError(f"repr has {repr_.frames.shape[1]} columns, "
                          f"skeleton-derived layout expects {layout.d}")
    frames = repr_.frames
    L = frames.shape[0]
    N = skel.joint_count

    yaw = np.empty(L)
    yaw[0] = anchor.yaw
    yaw[1:] = anchor.yaw + np.cumsum(frames[:-1, 0])

    rot = _yaw_rotation(yaw)                            # local -> global

    root = np.empty((L, 3))
    root[0, 0], root[0, 2] = anchor.position[0], anchor.position[2]
    local_v = np.zeros((L - 1, 3))
    local_v[:, 0] = frames[:-1, 1]
    local_v[:, 2] = frames[:-1, 2]
    global_v = np.einsum("tij,tj->ti", rot[:-1], local_v)
    root[1:, 0] = anchor.position[0] + np.cumsum(global_v[:, 0])
    root[1:, 2] = anchor.position[2] + np.cumsum(global_v[:, 2])
    root[:, 1] = frames[:, 3]

    local_rel = frames[:, layout.jp_offset:layout.jv_offset].reshape(L, N - 1, 3)
    rel = np.einsum("tij,tnj->tni", rot, local_rel)
    positions = np.empty((L, N, 3))
    positions[:, 0] = root
    positions[:, 1:] = root[:, None, :] + rel

    face = frames[:, layout.face_offset:]
    return RawMotion(positions, face.copy())


def split_parts(repr_: MotionRepr) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lay = repr_.layout
    f = repr_.frames
    return (f[:, lay.body_cols].copy(), f[:, lay.hand_cols].copy(),
            f[:, lay.face_cols].copy())


def merge_parts(m_b: np.ndarray, m_h: np.ndarray, m_f: np.ndarray,
                layout: MotionLayout) -> MotionRepr:
    m_b, m_h, m_f = (np.asarray(a, dtype=np.float64) for a in (m_b, m_h, m_f))
    L = m_b.shape[0]
    if m_h.shape[0] != L or m_f.shape[0] != L:
        raise MotionError(f"part lengths differ: {m_b.shape[0]}, {m_h.shape[0]}, "
                          f"{m_f.shape[0]}")
    if m_b.shape[1] != layout.d_b or m_h.shape[1] != layout.d_h \
            or m_f.shape[1] != layout.d_f:
        raise MotionError(
            f"part widths ({m_b.shape[1]}, {m_h.shape[1]}, {m_f.shape[1]}) do not "
            f"match layout ({layout.d_b}, {layout.d_h}, {layout.d_f})")
    frames = np.zeros((L, layout.d))
    frames[:, layout.body_cols] = m_b
    frames[:, layout.hand_cols] = m_h
    frames[:, layout.face_cols] = m_f
    return MotionRepr(frames, layout)


def _select_joints(skel: Skeleton, part: str) -> np.ndarray:
    if part == "all":
        return np.arange(skel.joint_count)
    if part == "body":
        return np.array(sorted(skel.body_joints))
    if part == "hand":
        return np.array(sorted(skel.hand_joints))
    raise MotionError(f"unknown part '{part}' (expected all|body|hand)")


def mpjpe(pred: RawMotion, gt: RawMotion, skel: Skeleton, part: str = "all") -> float:
    """Mean per-joint position error in millimeters."""
    if pred.positions.shape != gt.positions.shape:
        raise MotionError(f"shape mismatch: {pred.positions.shape} vs "
                          f"{gt.positions.shape}")
    joints = _select_joints(skel, part)
    err = np.linalg.norm(pred.positions[:, joints] - gt.positions[:, joints], axis=2)
    return float(err.mean() * 1000.0)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Optimal similarity transform (rotation, translation, uniform scale) of a
    single frame's joints (J, 3) onto the target frame."""
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    norm_p = np.sqrt((p0 ** 2).sum())
    if norm_p < 1e-12:
        raise MotionError("degenerate frame: all joints coincident")
    h = p0.T @ g0
    u, s, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    d = np.diag([1.0, 1.0, sign])
    rot = vt.T @ d @ u.T
    trace = (s * np.diag(d)).sum()
    scale = trace / (norm_p ** 2)
    return scale * (p0 @ rot.T) + mu_g


def pa_mpjpe(pred: RawMotion, gt: RawMotion, skel: Skeleton, part: str = "all") -> float:
    """MPJPE after per-frame Procrustes similarity alignment, in millimeters."""
    if pred.positions.shape != gt.positions.shape:
        raise MotionError(f"shape mismatch: {pred.positions.shape} vs "
                          f"{gt.positions.shape}")
    joints = _select_joints(skel, part)
    total = 0.0
    L = pred.length
    for t in range(L):
        aligned = procrustes_align(pred.positions[t, joints], gt.positions[t, joints])
        total += np.linalg.norm(aligned - gt.positions[t, joints], axis=1).mean()
    return float(total / L * 1000.0)


def accel_error(pred: RawMotion, gt: RawMotion, skel: Skeleton,
                part: str = "all") -> float:
    """Mean norm of the difference of second finite differences, mm/frame^2."""
    if pred.positions.shape != gt.positions.shape:
        raise MotionError(f"shape mismatch: {pred.positions.shape} vs "
                          f"{gt.positions.shape}")
    if pred.length < 3:
        raise MotionError("acceleration error needs at least 3 frames")
    joints = _select_joints(skel, part)

    def second_diff(p):
        x = p[:, joints]
        return x[2:] - 2.0 * x[1:-1] + x[:-2]

    diff = second_diff(pred.positions) - second_diff(gt.positions)
    return float(np.linalg.norm(diff, axis=2).mean() * 1000.0)
