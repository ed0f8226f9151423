"""Deterministic synthetic whole-body corpus, dataset splits, and the binary
motion/checkpoint file formats.

Motions are generated directly as global joint trajectories: a root path and
heading per family, rest-pose offsets, and per-joint oscillators propagated
down the parent chain. Every sequence starts at the canonical anchor (root on
the XZ origin, yaw 0), so decoded reconstructions are comparable without
storing anchors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CorpusConfig, SPLIT_PROPORTIONS, config_to_dict
from .motionrep import (FACE_DIM, MotionRepr, RawMotion, Skeleton,
                        default_skeleton, motion_layout, repr_encode)

MOTION_MAGIC = b"TMTO"
CHECKPOINT_MAGIC = b"TMCK"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0

FLAG_VELOCITY = 1
FLAG_CANONICAL_ANCHOR = 2


class CorpusIOError(ValueError):
    pass


# ---------------------------------------------------------------------------
# skeleton rest pose
# ---------------------------------------------------------------------------

ROOT_HEIGHT = 0.95

_BODY_REST = {
    0: (0.00, 0.00, 0.00),    # pelvis
    1: (+0.10, -0.04, 0.00),  # hips
    2: (-0.10, -0.04, 0.00),
    3: (0.00, +0.12, 0.00),   # spine chain
    4: (+0.11, -0.45, 0.02),  # knees
    5: (-0.11, -0.45, 0.02),
    6: (0.00, +0.25, 0.00),
    7: (+0.12, -0.87, 0.02),  # ankles
    8: (-0.12, -0.87, 0.02),
    9: (0.00, +0.38, 0.00),
    10: (+0.12, -0.95, 0.12),  # feet
    11: (-0.12, -0.95, 0.12),
    12: (0.00, +0.52, 0.00),   # neck
    13: (+0.06, +0.46, 0.00),  # collars
    14: (-0.06, +0.46, 0.00),
    15: (0.00, +0.65, 0.02),   # head
    16: (+0.18, +0.45, 0.00),  # shoulders
    17: (-0.18, +0.45, 0.00),
    18: (+0.20, +0.17, 0.00),  # elbows (arms hanging)
    19: (-0.20, +0.17, 0.00),
    20: (+0.21, -0.08, 0.00),  # wrists
    21: (-0.21, -0.08, 0.00),
}


def rest_offsets(skel: Skeleton) -> np.ndarray:
    """Root-local rest positions for every joint of the default skeleton."""
    if skel.joint_count != 52:
        raise CorpusIOError("rest pose is defined for the 52-joint default skeleton")
    rest = np.zeros((52, 3))
    for j, off in _BODY_REST.items():
        rest[j] = off
    for hand, (wrist, sign) in enumerate(((20, +1.0), (21, -1.0))):
        base_joint = 22 + 15 * hand
        for f in range(5):
            root = rest[wrist] + np.array([sign * (0.015 + 0.004 * f),
                                           -0.035, 0.055 - 0.02 * f])
            mid = root + np.array([sign * 0.008, -0.025, 0.015])
            tip = mid + np.array([sign * 0.004, -0.020, 0.010])
            rest[base_joint + 3 * f + 0] = root
            rest[base_joint + 3 * f + 1] = mid
            rest[base_joint + 3 * f + 2] = tip
    return rest


# ---------------------------------------------------------------------------
# procedural animation
# ---------------------------------------------------------------------------

SPEED_SCALE = {"slow": 0.6, "medium": 1.0, "fast": 1.5}
SIZE_SCALE = {"small": 0.7, "big": 1.3}

LEFT_ARM = [16, 18, 20] + list(range(22, 37))
RIGHT_ARM = [17, 19, 21] + list(range(37, 52))
LEFT_FINGERS = list(range(22, 37))
RIGHT_FINGERS = list(range(37, 52))
LEFT_LEG = [4, 7, 10]
RIGHT_LEG = [5, 8, 11]

EMOTIONS = ("happy", "sad", "angry", "surprised", "calm", "fearful",
            "disgusted", "neutral")


def _emotion_basis() -> np.ndarray:
    r = np.random.default_rng(0xFACE)
    basis = r.normal(0.0, 0.25, size=(len(EMOTIONS), FACE_DIM))
    return basis


_EMOTION_BASIS = _emotion_basis()


@dataclass
class CorpusItem:
    index: int
    family: str
    attrs: dict
    text: str
    repr: MotionRepr
    split: str = ""

    @property
    def length(self) -> int:
        return self.repr.length


def _root_trajectory(family: str, L: int, speed: float, size: float,
                     rng: np.random.Generator):
    """Per-frame root XZ position, yaw, and height offset."""
    t = np.arange(L, dtype=np.float64)
    yaw = np.zeros(L)
    xz = np.zeros((L, 2))
    dy = np.zeros(L)
    if family == "walk_forward":
        v = 0.035 * speed
        xz[:, 1] = v * t
        dy = 0.01 * np.sin(2 * np.pi * 1.4 * speed * t / 30.0 * 2)
    elif family == "walk_backward":
        v = 0.030 * speed
        xz[:, 1] = -v * t
        dy = 0.01 * np.sin(2 * np.pi * 1.4 * speed * t / 30.0 * 2)
    elif family in ("circle_cw", "circle_ccw"):
        s = 1.0 if family == "circle_ccw" else -1.0
        radius = 0.9 * (1.0 + 0.1 * rng.standard_normal()) * size * speed
        yaw = s * 2.0 * np.pi * t / (L - 1)
        xz[:, 0] = s * radius + radius * (-s * np.cos(yaw))
        xz[:, 1] = radius * (s * np.sin(yaw))
    elif family == "squat":
        depth = 0.22 * size
        dy = -depth * 0.5 * (1.0 - np.cos(2 * np.pi * 0.8 * speed * t / (L - 1) * 2))
    else:  # wave, fist, reach_up: stationary with gentle sway
        xz[:, 0] = 0.01 * np.sin(2 * np.pi * 0.5 * t / (L - 1))
    return xz, yaw, dy


def _joint_oscillation(family: str, L: int, skel: Skeleton, speed: float,
                       size: float, side: str,
                       rng: np.random.Generator) -> np.ndarray:
    """Root-local displacement per joint before chain propagation: (L, N, 3)."""
    t = np.arange(L, dtype=np.float64)
    own = np.zeros((L, skel.joint_count, 3))
    gait_freq = 1.3 * speed / 30.0
    phase = 2 * np.pi * gait_freq * t

    def swing(joints, amp, axis, ph=0.0):
        for j in joints:
            own[:, j, axis] += amp * np.sin(phase + ph)

    if family in ("walk_forward", "walk_backward", "circle_cw", "circle_ccw"):
        leg_amp = 0.12 * size
        swing([4], leg_amp, 2)
        swing([5], leg_amp, 2, np.pi)
        swing([7, 10], leg_amp * 1.6, 2)
        swing([8, 11], leg_amp * 1.6, 2, np.pi)
        swing([18, 20], 0.05 * size, 2, np.pi)
        swing([19, 21], 0.05 * size, 2)
    elif family == "wave":
        joints = {"left": [18, 20], "right": [19, 21],
                  "both": [18, 19, 20, 21]}[side]
        lift = 0.45
        for j in joints:
            own[:, j, 1] += lift * (0.6 if j in (18, 19) else 1.0)
        wave_joints = {"left": [20], "right": [21], "both": [20, 21]}[side]
        for j in wave_joints:
            own[:, j, 0] += 0.18 * size * np.sin(2 * np.pi * 1.8 * speed * t / 30.0)
    elif family == "fist":
        finger_sets = {"left": [LEFT_FINGERS], "right": [RIGHT_FINGERS],
                       "both": [LEFT_FINGERS, RIGHT_FINGERS]}[side]
        rest = rest_offsets(skel)
        curl = 0.5 + 0.5 * np.sin(2 * np.pi * 1.2 * speed * t / 30.0)
        for fingers in finger_sets:
            wrist = 20 if fingers is LEFT_FINGERS else 21
            for j in fingers:
                toward = rest[wrist] - rest[j]
                own[:, j, :] += 0.85 * size * curl[:, None] * toward[None, :]
    elif family == "squat":
        bend = 0.5 * (1.0 - np.cos(2 * np.pi * 0.8 * speed * t / (L - 1) * 2))
        for j in (4, 5):
            own[:, j, 2] += 0.10 * size * bend
        for j in (18, 19, 20, 21):
            own[:, j, 2] += 0.12 * size * bend
    elif family == "reach_up":
        stretch = 0.5 * (1.0 - np.cos(2 * np.pi * 0.7 * speed * t / (L - 1)))
        arm_sets = {"left": [LEFT_ARM], "right": [RIGHT_ARM],
                    "both": [LEFT_ARM, RIGHT_ARM]}[side]
        for arms in arm_sets:
            for j in arms:
                extra = 0.35 if j in (20, 21) or j >= 22 else 0.2
                own[:, j, 1] += (0.25 + extra) * size * stretch

    # smooth seeded wobble keeps velocity channels informative everywhere;
    # hips stay clean so heading extraction matches the constructed yaw
    freqs = rng.uniform(0.3, 1.2, size=(2, skel.joint_count, 3))
    phases = rng.uniform(0, 2 * np.pi, size=(2, skel.joint_count, 3))
    amps = rng.uniform(0.0005, 0.002, size=(2, skel.joint_count, 3))
    for k in range(2):
        own += amps[k] * np.sin(2 * np.pi * freqs[k] * t[:, None, None] / 30.0
                                + phases[k])
    own[:, [0, skel.left_hip, skel.right_hip], :] = 0.0
    return own


def _propagate_chain(own: np.ndarray, skel: Skeleton) -> np.ndarray:
    """Accumulate displacements down the parent chain (root excluded)."""
    disp = np.zeros_like(own)
    for j in range(1, skel.joint_count):
        parent = skel.parents[j]
        disp[:, j] = disp[:, parent] + own[:, j]
    return disp


def synthesize_motion(family: str, L: int, skel: Skeleton, attrs: dict,
                      rng: np.random.Generator) -> RawMotion:
    speed = SPEED_SCALE[attrs["speed"]]
    size = SIZE_SCALE[attrs["size"]]
    side = attrs.get("side", "both")

    xz, yaw, dy = _root_trajectory(family, L, speed, size, rng)
    rest = rest_offsets(skel)
    own = _joint_oscillation(family, L, skel, speed, size, side, rng)
    disp = _propagate_chain(own, skel)
    local = rest[None, :, :] + disp              # (L, N, 3) root-local

    c, s = np.cos(yaw), np.sin(yaw)
    gx = c[:, None] * local[:, :, 0] + s[:, None] * local[:, :, 2]
    gz = -s[:, None] * local[:, :, 0] + c[:, None] * local[:, :, 2]

    positions = np.empty((L, skel.joint_count, 3))
    positions[:, :, 0] = gx + xz[:, 0][:, None]
    positions[:, :, 2] = gz + xz[:, 1][:, None]
    positions[:, :, 1] = local[:, :, 1] + (ROOT_HEIGHT + dy)[:, None]

    face = synthesize_face(attrs["emotion"], L, rng)
    return RawMotion(positions, face)


def synthesize_face(emotion: str, L: int, rng: np.random.Generator) -> np.ndarray:
    basis = _EMOTION_BASIS[EMOTIONS.index(emotion)]
    t = np.arange(L, dtype=np.float64)
    f = rng.uniform(0.4, 0.9)
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.65 + 0.35 * np.sin(2 * np.pi * f * t / 30.0 + phase)
    face = basis[None, :] * envelope[:, None]
    jitter_f = rng.uniform(0.2, 0.8, size=FACE_DIM)
    jitter_p = rng.uniform(0, 2 * np.pi, size=FACE_DIM)
    face = face + 0.01 * np.sin(2 * np.pi * jitter_f[None, :] * t[:, None] / 30.0
                                + jitter_p[None, :])
    return face


# ---------------------------------------------------------------------------
# text templating
# ---------------------------------------------------------------------------

_SPEED_PHRASE = {
    "slow": ["slowly", "at a slow pace"],
    "medium": ["at a steady pace", ""],
    "fast": ["quickly", "at a brisk pace"],
}
_SIZE_PHRASE = {"small": "small", "big": "wide"}
_EMOTION_PHRASE = ["with a {e} expression", "looking {e}", "feeling {e}"]

_TEMPLATES = {
    "walk_forward": ["a person walks forward {speed}",
                     "someone is walking straight ahead {speed}",
                     "the person moves forwards {speed}"],
    "walk_backward": ["a person walks backward {speed}",
                      "someone is walking backwards {speed}",
                      "the person steps back {speed}"],
    "circle_cw": ["a person walks in a {size} clockwise circle {speed}",
                  "someone walks a {size} circle clockwise {speed}",
                  "the person goes around clockwise in a {size} loop {speed}"],
    "circle_ccw": ["a person walks in a {size} counter-clockwise circle {speed}",
                   "someone walks a {size} circle counterclockwise {speed}",
                   "the person goes around anticlockwise in a {size} loop {speed}"],
    "wave": ["a person waves with {hand} {speed}",
             "someone is waving {hand} {speed}",
             "the person raises {hand} and waves {speed}"],
    "fist": ["a person clenches {hand} into a fist {speed}",
             "someone repeatedly makes a fist with {hand} {speed}",
             "the person squeezes {hand} into a fist {speed}"],
    "squat": ["a person squats down {size_adj} {speed}",
              "someone does a {size_adj} squat {speed}",
              "the person bends the knees into a {size_adj} squat {speed}"],
    "reach_up": ["a person reaches up with {hand} {speed}",
                 "someone stretches {hand} overhead {speed}",
                 "the person raises {hand} high {speed}"],
}

_SIDED_FAMILIES = {"wave", "fist", "reach_up"}


def _compose_text(family: str, attrs: dict, rng: np.random.Generator) -> str:
    template = _TEMPLATES[family][rng.integers(0, len(_TEMPLATES[family]))]
    speed = _SPEED_PHRASE[attrs["speed"]][rng.integers(0, 2)]
    side = attrs.get("side", "both")
    hand = "both hands" if side == "both" else f"the {side} hand"
    text = template.format(speed=speed, size=_SIZE_PHRASE[attrs["size"]],
                           size_adj="deep" if attrs["size"] == "big" else "shallow",
                           hand=hand)
    text = " ".join(text.split())
    if rng.random() < 0.75:
        clause = _EMOTION_PHRASE[rng.integers(0, len(_EMOTION_PHRASE))]
        emotion = attrs["emotion"]
        clause = clause.format(e=emotion)
        if clause.startswith("with a ") and emotion[0] in "aeiou":
            clause = clause.replace("with a ", "with an ", 1)
        text = f"{text} {clause}"
    return text


def _draw_attrs(family: str, rng: np.random.Generator) -> dict:
    attrs = {
        "speed": ("slow", "medium", "fast")[rng.integers(0, 3)],
        "size": ("small", "big")[rng.integers(0, 2)],
        "emotion": EMOTIONS[rng.integers(0, len(EMOTIONS))],
    }
    if family in _SIDED_FAMILIES:
        attrs["side"] = ("left", "right", "both")[rng.integers(0, 3)]
    return attrs


# ---------------------------------------------------------------------------
# corpus assembly and splits
# ---------------------------------------------------------------------------

def gen_corpus(cfg: CorpusConfig, skel: Skeleton | None = None) -> list[CorpusItem]:
    """Procedural corpus: >= 8 families with chirality/direction and hand
    gesture pairs, templated texts, and an 80/5/15 split."""
    if len(cfg.families) < 8:
        raise CorpusIOError("corpus needs at least 8 motion families")
    skel = skel or default_skeleton(cfg.frame_rate)
    per_family = cfg.items_per_family
    if per_family * len(cfg.families) < 20:
        raise CorpusIOError("corpus too small to split 80/5/15")

    root_seq = np.random.SeedSequence(cfg.seed)
    family_seqs = root_seq.spawn(len(cfg.families))

    by_family: list[list[CorpusItem]] = []
    index = 0
    for family, fam_seq in zip(cfg.families, family_seqs):
        items = []
        for child in fam_seq.spawn(per_family):
            rng = np.random.default_rng(child)
            attrs = _draw_attrs(family, rng)
            L = int(rng.integers(cfg.min_length, cfg.max_length + 1))
            raw = synthesize_motion(family, L, skel, attrs, rng)
            rep = repr_encode(raw, skel)
            text = _compose_text(family, attrs, rng)
            items.append(CorpusItem(index=index, family=family, attrs=attrs,
                                    text=text, repr=rep))
            index += 1
        by_family.append(items)

    ordered: list[CorpusItem] = []
    for i in range(per_family):
        for items in by_family:
            ordered.append(items[i])

    n = len(ordered)
    n_train = round(SPLIT_PROPORTIONS[0] * n)
    n_val = round(SPLIT_PROPORTIONS[1] * n)
    for i, item in enumerate(ordered):
        item.split = "train" if i < n_train else (
            "val" if i < n_train + n_val else "test")
    return ordered


def split_items(items: list[CorpusItem], split: str) -> list[CorpusItem]:
    return [it for it in items if it.split == split]


def channel_stats(items: list[CorpusItem], cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over the train split's selected columns."""
    stacked = np.concatenate([it.repr.frames[:, cols] for it in items], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std < 1e-6] = 1.0
    return mean, std


# ---------------------------------------------------------------------------
# motion file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHIIIfIIII")  # 36 bytes used, zero-padded to 64
HEADER_SIZE = 64


def save_motion_file(path, repr_: MotionRepr, skel: Skeleton) -> None:
    lay = repr_.layout
    flags = FLAG_CANONICAL_ANCHOR | (FLAG_VELOCITY if repr_.velocity_included else 0)
    header = _HEADER.pack(MOTION_MAGIC, FORMAT_MAJOR, FORMAT_MINOR,
                          repr_.length, skel.joint_count, lay.d,
                          skel.frame_rate, flags,
                          len(skel.body_joints), len(skel.hand_joints),
                          lay.d_f)
    payload = repr_.frames.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header.ljust(HEADER_SIZE, b"\0"))
        fh.write(payload)


def load_motion_file(path, skel: Skeleton | None = None) -> MotionRepr:
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise CorpusIOError(f"{path}: truncated header ({len(data)} bytes)")
    (magic, major, minor, length, n_joints, d, fps, flags,
     n_body, n_hand, d_f) = _HEADER.unpack(data[:_HEADER.size])
    if magic != MOTION_MAGIC:
        raise CorpusIOError(f"{path}: bad magic {magic!r}")
    if major != FORMAT_MAJOR:
        raise CorpusIOError(f"{path}: unsupported format major {major} "
                            f"(supported: {FORMAT_MAJOR})")
    expected = HEADER_SIZE + 4 * length * d
    if len(data) != expected:
        raise CorpusIOError(f"{path}: size mismatch, expected {expected} bytes "
                            f"({length}x{d} floats), found {len(data)}")
    skel = skel or default_skeleton(fps)
    lay = motion_layout(skel)
    if skel.joint_count != n_joints or lay.d != d:
        raise CorpusIOError(
            f"{path}: header declares N={n_joints}, d={d}; skeleton-derived "
            f"layout expects N={skel.joint_count}, d={lay.d}")
    frames = np.frombuffer(data[HEADER_SIZE:], dtype="<f4").reshape(length, d)
    return MotionRepr(frames.astype(np.float64), lay,
                      velocity_included=bool(flags & FLAG_VELOCITY))


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    corpus_seed: int
    frame_rate: float
    skeleton: dict
    proportions: tuple
    items: list  # dicts: path, text, family, split, length, attrs

    def records(self, split: str | None = None) -> list[dict]:
        if split is None:
            return list(self.items)
        return [r for r in self.items if r["split"] == split]


def save_corpus(out_dir, items: list[CorpusItem], cfg: CorpusConfig,
                skel: Skeleton | None = None) -> Path:
    skel = skel or default_skeleton(cfg.frame_rate)
    out_dir = Path(out_dir)
    motion_dir = out_dir / "motions"
    motion_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for item in items:
        rel = f"motions/{item.index:05d}.tmto"
        save_motion_file(out_dir / rel, item.repr, skel)
        records.append({
            "path": rel, "text": item.text, "family": item.family,
            "split": item.split, "length": item.length, "attrs": item.attrs,
        })
    manifest = {
        "corpus_seed": cfg.seed,
        "frame_rate": cfg.frame_rate,
        "skeleton": {
            "joint_count": skel.joint_count,
            "body_joints": list(skel.body_joints),
            "hand_joints": list(skel.hand_joints),
            "parents": list(skel.parents),
        },
        "proportions": list(SPLIT_PROPORTIONS),
        "config": config_to_dict(cfg),
        "items": records,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusIOError(f"{path}: invalid manifest JSON ({exc})") from None
    return DatasetManifest(
        corpus_seed=raw["corpus_seed"], frame_rate=raw["frame_rate"],
        skeleton=raw["skeleton"], proportions=tuple(raw["proportions"]),
        items=raw["items"])


def load_corpus(manifest_path) -> tuple[list[CorpusItem], Skeleton]:
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    sk = manifest.skeleton
    skel = Skeleton(joint_count=sk["joint_count"], parents=tuple(sk["parents"]),
                    body_joints=tuple(sk["body_joints"]),
                    hand_joints=tuple(sk["hand_joints"]),
                    frame_rate=manifest.frame_rate)
    items = []
    for i, rec in enumerate(manifest.items):
        rep = load_motion_file(base / rec["path"], skel)
        items.append(CorpusItem(index=i, family=rec["family"],
                                attrs=rec.get("attrs", {}), text=rec["text"],
                                repr=rep, split=rec["split"]))
    return items, skel


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    module_id: str
    config: dict
    step: int
    blocks: dict  # name -> float64 ndarray


def save_checkpoint(path, module_id: str, config, blocks: dict, step: int = 0) -> None:
    index = []
    payloads = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
        index.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.astype("<f8").tobytes())
    header = {
        "module_id": module_id,
        "config": config_to_dict(config) if config is not None else {},
        "step": int(step),
        "blocks": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HHQ", FORMAT_MAJOR, FORMAT_MINOR, len(header_bytes)))
        fh.write(header_bytes)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path, expected_module: str | None = None,
                    expected_config: dict | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CorpusIOError(f"{path}: not a checkpoint (bad magic)")
    major, minor, hlen = struct.unpack("<HHQ", data[4:16])
    if major != FORMAT_MAJOR:
        raise CorpusIOError(f"{path}: unsupported checkpoint major {major}")
    header = json.loads(data[16:16 + hlen].decode())
    offset = 16 + hlen
    blocks = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorpusIOError(f"{path}: block '{entry['name']}' truncated "
                                f"(expected {nbytes} bytes, found {len(chunk)})")
        blocks[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CorpusIOError(f"{path}: {len(data) - offset} trailing bytes")
    ck = Checkpoint(module_id=header["module_id"], config=header["config"],
                    step=header["step"], blocks=blocks)
    if expected_module is not None and ck.module_id != expected_module:
        raise CorpusIOError(f"{path}: checkpoint is '{ck.module_id}', "
                            f"expected '{expected_module}'")
    if expected_config is not None:
        got = dict(ck.config)
        want = config_to_dict(expected_config)
        if got != want:
            diff = {k for k in set(got) | set(want) if got.get(k) != want.get(k)}
            raise CorpusIOError(f"{path}: configuration mismatch on load "
                                f"(fields: {sorted(diff)})")
    return ck
