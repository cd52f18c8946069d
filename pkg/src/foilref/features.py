"""Per-frame kinematic features from canonical left-facing pose tracks.

Each frame becomes a 101-entry vector laid out as fixed blocks: normalized
joint coordinates, center of mass, pairwise distances, elbow/knee angles,
torso orientation, arm extension, and first/second temporal derivatives of
joints and center of mass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import NUM_JOINTS, PoseTrack, Side

# The 12 body joints (COCO indices 5..16); the five head joints are dropped.
BODY_JOINT_OFFSET = 5
NUM_BODY_JOINTS = 12

# Indices within the 12-joint body set.
LSH, RSH, LEL, REL, LWR, RWR, LHIP, RHIP, LKN, RKN, LANK, RANK = range(12)

# Fixed distance-pair list: lateral spans plus hand-to-leg extension cues.
DISTANCE_PAIRS = (
    (LWR, RWR),
    (LANK, RANK),
    (LSH, RSH),
    (LHIP, RHIP),
    (LEL, REL),
    (LKN, RKN),
    (LWR, LANK),
    (RWR, RANK),
    (LWR, RANK),
    (RWR, LANK),
    (LWR, LHIP),
)

# Elbow and knee angle triples (outer, vertex, outer).
ANGLE_TRIPLES = (
    (LSH, LEL, LWR),
    (RSH, REL, RWR),
    (LHIP, LKN, LANK),
    (RHIP, RKN, RANK),
)

_BLOCK_SIZES = (
    ("joints", 24),
    ("com", 2),
    ("distances", 11),
    ("angles", 4),
    ("torso", 2),
    ("arms", 6),
    ("velocities", 24),
    ("accelerations", 24),
    ("com_derivatives", 4),
)


def _build_layout() -> dict[str, slice]:
    layout = {}
    offset = 0
    for name, size in _BLOCK_SIZES:
        layout[name] = slice(offset, offset + size)
        offset += size
    return layout


FEATURE_LAYOUT = _build_layout()
FEATURE_DIM = sum(size for _, size in _BLOCK_SIZES)

TORSO_EPS = 1e-6
SEGMENT_EPS = 1e-6


@dataclass(frozen=True)
class NormalizedSkeleton:
    """12 body joints in torso units, pelvis-centered."""

    coords: np.ndarray  # (12, 2)
    joint_valid: np.ndarray  # (12,) bool


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame feature vectors for one fencer, plus a frame validity mask."""

    clip_id: str
    side: Side
    features: np.ndarray  # (T, FEATURE_DIM) float64
    valid: np.ndarray  # (T,) bool

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
            raise ValueError(f"features must have shape (T, {FEATURE_DIM}), got {feats.shape}")
        if valid.shape != (feats.shape[0],):
            raise ValueError("valid mask length must match frame count")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "side", Side(self.side))

    def __len__(self) -> int:
        return self.features.shape[0]


def normalize_skeleton(joints: np.ndarray) -> NormalizedSkeleton | None:
    """Pelvis-center and torso-normalize one skeleton's body joints.

    ``joints`` is the (17, 3) array of a :class:`~foilref.core.Skeleton17`.
    Returns None when the frame is unusable: a hip or shoulder is missing
    (confidence 0) or the average torso length degenerates below epsilon.
    """
    body = joints[BODY_JOINT_OFFSET:, :]
    coords = body[:, :2]
    conf = body[:, 2]
    if conf[LSH] <= 0.0 or conf[RSH] <= 0.0 or conf[LHIP] <= 0.0 or conf[RHIP] <= 0.0:
        return None
    pelvis = 0.5 * (coords[LHIP] + coords[RHIP])
    torso = 0.5 * (
        np.linalg.norm(coords[LSH] - coords[LHIP]) + np.linalg.norm(coords[RSH] - coords[RHIP])
    )
    if torso < TORSO_EPS:
        return None
    normalized = (coords - pelvis) / torso
    return NormalizedSkeleton(normalized, conf > 0.0)


def joint_angle(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    """Interior angle at vertex b between rays b->a and b->c, in [0, pi].

    Degenerate rays (either segment shorter than epsilon) yield 0.0; the
    caller is responsible for flagging the frame.
    """
    u = np.asarray(a, dtype=np.float64) - b
    v = np.asarray(c, dtype=np.float64) - b
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < SEGMENT_EPS or nv < SEGMENT_EPS:
        return 0.0
    cos = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.arccos(cos))


def temporal_derivatives(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First and second finite differences along axis 0.

    v[0] and a[0] are zero-padded so the first frames stay usable;
    a[1] = v[1] - v[0] by the same rule.
    """
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.zeros_like(positions)
    if positions.shape[0] > 1:
        velocities[1:] = positions[1:] - positions[:-1]
    accelerations = np.zeros_like(positions)
    if positions.shape[0] > 1:
        accelerations[1:] = velocities[1:] - velocities[:-1]
    return velocities, accelerations


def normalize_track(track: PoseTrack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalize every frame of a track.

    Returns (coords (T, 12, 2), joint_valid (T, 12), frame_valid (T,)).
    Invalid frames carry zero coordinates and joint_valid all-False.
    """
    if not track.canonical_left_view:
        raise ValueError(
            "track is not in the canonical left-facing view; apply mirroring first"
        )
    n = len(track)
    coords = np.zeros((n, NUM_BODY_JOINTS, 2), dtype=np.float64)
    joint_valid = np.zeros((n, NUM_BODY_JOINTS), dtype=bool)
    frame_valid = np.zeros(n, dtype=bool)
    for t in range(n):
        norm = normalize_skeleton(track.joints[t])
        if norm is None:
            continue
        coords[t] = norm.coords
        joint_valid[t] = norm.joint_valid
        frame_valid[t] = True
    return coords, joint_valid, frame_valid


def assemble_from_normalized(
    coords: np.ndarray, joint_valid: np.ndarray, frame_valid: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Build the per-frame feature matrix from normalized joint sequences.

    Temporal derivatives are taken over a gap-filled copy of the sequence
    (invalid frames hold the previous valid pose) so a single bad frame does
    not inject velocity spikes into its neighbours. Frames flagged invalid,
    including frames with degenerate angle segments, come out as zero rows.
    """
    n = coords.shape[0]
    features = np.zeros((n, FEATURE_DIM), dtype=np.float64)
    valid = np.array(frame_valid, dtype=bool)

    # Gap-filled positions for derivative continuity.
    filled = np.array(coords)
    com = np.zeros((n, 2), dtype=np.float64)
    last = None
    last_com = None
    for t in range(n):
        if frame_valid[t]:
            active = joint_valid[t]
            com[t] = coords[t][active].mean(axis=0) if np.any(active) else 0.0
            last = filled[t]
            last_com = com[t]
        elif last is not None:
            filled[t] = last
            com[t] = last_com
    velocities, accelerations = temporal_derivatives(filled)
    com_vel, com_acc = temporal_derivatives(com)

    lay = FEATURE_LAYOUT
    for t in range(n):
        if not valid[t]:
            continue
        c = coords[t]
        row = features[t]
        row[lay["joints"]] = c.reshape(-1)
        row[lay["com"]] = com[t]
        row[lay["distances"]] = [np.linalg.norm(c[a] - c[b]) for a, b in DISTANCE_PAIRS]

        angles = np.empty(4)
        degenerate = False
        for k, (a, b, cc) in enumerate(ANGLE_TRIPLES):
            if (
                np.linalg.norm(c[a] - c[b]) < SEGMENT_EPS
                or np.linalg.norm(c[cc] - c[b]) < SEGMENT_EPS
            ):
                degenerate = True
                break
            angles[k] = joint_angle(c[a], c[b], c[cc])
        if degenerate:
            row[:] = 0.0
            valid[t] = False
            continue
        row[lay["angles"]] = angles

        # Torso lean: signed angle of the shoulder-center -> hip-center axis
        # against the image vertical; upright maps to (sin, cos) = (0, 1).
        axis = 0.5 * (c[LHIP] + c[RHIP]) - 0.5 * (c[LSH] + c[RSH])
        theta = np.arctan2(-axis[0], axis[1])
        row[lay["torso"]] = (np.sin(theta), np.cos(theta))

        arms = np.zeros(6)
        for k, (sh, wr) in enumerate(((LSH, LWR), (RSH, RWR))):
            d = c[wr] - c[sh]
            mag = np.linalg.norm(d)
            arms[3 * k] = mag
            if mag >= SEGMENT_EPS:
                arms[3 * k + 1 : 3 * k + 3] = d / mag
        row[lay["arms"]] = arms

        row[lay["velocities"]] = velocities[t].reshape(-1)
        row[lay["accelerations"]] = accelerations[t].reshape(-1)
        row[lay["com_derivatives"]] = np.concatenate([com_vel[t], com_acc[t]])
    return features, valid


def assemble_features(track: PoseTrack) -> FeatureSequence:
    """Convert a canonical left-view track into its feature sequence."""
    coords, joint_valid, frame_valid = normalize_track(track)
    features, valid = assemble_from_normalized(coords, joint_valid, frame_valid)
    return FeatureSequence(track.clip_id, track.side, features, valid)


class KinematicFeatureExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer from pose tracks to feature sequences.

    Exists so the feature stage composes with sklearn pipelines; there is
    nothing to fit. ``transform`` accepts a single track or an iterable and
    mirrors right-side tracks into the canonical view when ``auto_mirror``.
    """

    def __init__(self, auto_mirror: bool = True):
        self.auto_mirror = auto_mirror

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        from .core import to_canonical_left_view

        single = isinstance(X, PoseTrack)
        tracks = [X] if single else list(X)
        out = []
        for track in tracks:
            if self.auto_mirror:
                track = to_canonical_left_view(track)
            out.append(assemble_features(track))
        return out[0] if single else out


# ---------------------------------------------------------------------------
# Feature file format: little-endian f32 blocks behind a small header
# ---------------------------------------------------------------------------

_MAGIC = b"FSQ1"


def write_features(path, seq: FeatureSequence) -> None:
    path = Path(path)
    clip = seq.clip_id.encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", len(clip)))
        fh.write(clip)
        fh.write(struct.pack("<B", 0 if seq.side is Side.LEFT else 1))
        fh.write(struct.pack("<II", len(seq), FEATURE_DIM))
        fh.write(np.asarray(seq.valid, dtype=np.uint8).tobytes())
        fh.write(seq.features.astype("<f4").tobytes())


def read_features(path) -> FeatureSequence:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    off = 4
    (clip_len,) = struct.unpack_from("<H", data, off)
    off += 2
    clip_id = data[off : off + clip_len].decode("utf-8")
    off += clip_len
    (side_code,) = struct.unpack_from("<B", data, off)
    off += 1
    n, dim = struct.unpack_from("<II", data, off)
    off += 8
    if dim != FEATURE_DIM:
        raise ValueError(f"{path}: feature dim {dim} does not match expected {FEATURE_DIM}")
    valid = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).astype(bool)
    off += n
    feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    side = Side.LEFT if side_code == 0 else Side.RIGHT
    return FeatureSequence(clip_id, side, feats.astype(np.float64), valid)


def write_features_csv(path, seq: FeatureSequence) -> None:
    """Debug export: one row per frame, block-labeled header."""
    header = ["frame", "valid"]
    for name, size in _BLOCK_SIZES:
        header.extend(f"{name}_{i}" for i in range(size))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(len(seq)):
            row = [str(t), str(int(seq.valid[t]))] + [repr(v) for v in seq.features[t]]
            fh.write(",".join(row) + "\n")
