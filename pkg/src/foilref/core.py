"""Domain model and file formats for two-fencer pose and annotation data.

Pose data enters as JSON Lines (one frame per line, optional header line
with clip metadata), annotations as a flat CSV with "+"-joined move names.
Everything downstream (tracking, features, detection, refereeing) is built
on the types defined here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

# Pixel coordinates snap to a 1/1024 px grid on construction. The grid is
# ~4 orders of magnitude below pose-estimator noise and buys two exactness
# guarantees: horizontal mirroring (x -> W - x) is a bit-exact involution,
# and file round-trips reproduce coordinates bit-for-bit.
COORD_GRID = 1024.0

COCO_JOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

NUM_JOINTS = 17

# Anatomical left/right pairs swapped on horizontal mirroring so the
# fencer's left wrist stays their left wrist in the mirrored view.
MIRROR_SWAP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))


class ParseError(ValueError):
    """A required field is missing or malformed at a known file line."""

    def __init__(self, path, line_number: int, message: str, field_name: str | None = None):
        self.path = str(path)
        self.line_number = line_number
        self.field_name = field_name
        super().__init__(f"{self.path}:{line_number}: {message}")


class StructureError(ValueError):
    """The file is line-wise well formed but structurally invalid."""


def snap_to_grid(values: np.ndarray) -> np.ndarray:
    """Round pixel coordinates to the canonical 1/1024 px grid."""
    return np.round(np.asarray(values, dtype=np.float64) * COORD_GRID) / COORD_GRID


class Keypoint(NamedTuple):
    x: float
    y: float
    confidence: float


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def opposite(self) -> "Side":
        return Side.RIGHT if self is Side.LEFT else Side.LEFT


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Skeleton17:
    """A 17-keypoint COCO skeleton stored as a read-only (17, 3) array.

    Columns are (x, y, confidence). Coordinates are snapped to the canonical
    pixel grid; confidences must lie in [0, 1]. Confidence 0 marks a missing
    joint whose coordinates are carried over from the last valid detection.
    """

    joints: np.ndarray

    def __post_init__(self):
        arr = np.array(self.joints, dtype=np.float64)
        if arr.shape != (NUM_JOINTS, 3):
            raise ValueError(f"skeleton must have shape (17, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("skeleton contains non-finite values")
        if np.any(arr[:, 2] < 0.0) or np.any(arr[:, 2] > 1.0):
            raise ValueError("joint confidences must lie in [0, 1]")
        arr[:, :2] = snap_to_grid(arr[:, :2])
        object.__setattr__(self, "joints", _freeze(arr))

    @classmethod
    def from_keypoints(cls, keypoints: Sequence[Keypoint]) -> "Skeleton17":
        if len(keypoints) != NUM_JOINTS:
            raise ValueError(f"expected 17 keypoints, got {len(keypoints)}")
        return cls(np.array([[k.x, k.y, k.confidence] for k in keypoints]))

    def keypoint(self, index: int) -> Keypoint:
        x, y, c = self.joints[index]
        return Keypoint(float(x), float(y), float(c))

    def mirrored(self, width: float) -> "Skeleton17":
        arr = np.array(self.joints)
        arr[:, 0] = width - arr[:, 0]
        for a, b in MIRROR_SWAP_PAIRS:
            arr[[a, b]] = arr[[b, a]]
        return Skeleton17(arr)

    def __eq__(self, other) -> bool:
        return isinstance(other, Skeleton17) and np.array_equal(self.joints, other.joints)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max)):
            raise ValueError("bounding box coordinates must be finite")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("bounding box must satisfy x_min <= x_max and y_min <= y_max")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def mirrored(self, width: float) -> "BoundingBox":
        return BoundingBox(width - self.x_max, self.y_min, width - self.x_min, self.y_max, self.confidence)


@dataclass(frozen=True)
class PoseFrame:
    """All person candidates detected in one video frame."""

    frame_index: int
    candidates: tuple[tuple[BoundingBox, Skeleton17], ...]

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        object.__setattr__(self, "candidates", tuple(self.candidates))


@dataclass(frozen=True)
class PoseFile:
    """Parsed pose file: optional clip metadata plus frames in index order."""

    frames: tuple[PoseFrame, ...]
    clip_id: str = ""
    width: int | None = None
    height: int | None = None
    fps: float | None = None

    @property
    def frame_size(self) -> tuple[int, int] | None:
        if self.width is None or self.height is None:
            return None
        return (self.width, self.height)


@dataclass(frozen=True)
class PoseTrack:
    """One fencer's skeleton sequence over a contiguous frame range.

    ``side`` is the fencer's identity on the piste and never changes;
    ``mirrored`` records whether the coordinates have been flipped into the
    canonical left-facing view. Frames where the tracker had no detection
    carry ``present=False`` and hold the last smoothed pose.
    """

    clip_id: str
    side: Side
    start_frame: int
    joints: np.ndarray  # (T, 17, 3) float64, read-only
    present: np.ndarray  # (T,) bool, read-only
    frame_size: tuple[int, int] | None
    mirrored: bool = False

    def __post_init__(self):
        joints = np.array(self.joints, dtype=np.float64)
        present = np.array(self.present, dtype=bool)
        if joints.ndim != 3 or joints.shape[1:] != (NUM_JOINTS, 3):
            raise ValueError(f"track joints must have shape (T, 17, 3), got {joints.shape}")
        if present.shape != (joints.shape[0],):
            raise ValueError("present mask length must match frame count")
        if not np.all(np.isfinite(joints)):
            raise ValueError("track contains non-finite values")
        joints[:, :, :2] = snap_to_grid(joints[:, :, :2])
        object.__setattr__(self, "joints", _freeze(joints))
        object.__setattr__(self, "present", _freeze(present))
        object.__setattr__(self, "side", Side(self.side))

    def __len__(self) -> int:
        return self.joints.shape[0]

    @property
    def frame_indices(self) -> np.ndarray:
        return np.arange(self.start_frame, self.start_frame + len(self))

    def skeleton(self, offset: int) -> Skeleton17:
        return Skeleton17(self.joints[offset])

    def frames(self) -> Iterator[tuple[int, Skeleton17, bool]]:
        for i in range(len(self)):
            yield self.start_frame + i, self.skeleton(i), bool(self.present[i])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PoseTrack)
            and self.clip_id == other.clip_id
            and self.side == other.side
            and self.start_frame == other.start_frame
            and self.frame_size == other.frame_size
            and self.mirrored == other.mirrored
            and np.array_equal(self.joints, other.joints)
            and np.array_equal(self.present, other.present)
        )

    @property
    def canonical_left_view(self) -> bool:
        """True when the fencer faces right from the left, as the model expects."""
        return (self.side is Side.LEFT) != self.mirrored


class MoveLabel(IntEnum):
    """The twelve move labels; numeric codes are part of the label contract."""

    STEP_FORWARD = 1
    STEP_BACKWARD = 2
    HALF_STEP_FORWARD = 3
    HALF_STEP_BACKWARD = 4
    LUNGE = 5
    FLECHE = 6
    WAIT = 7
    PARRY = 8
    BEAT = 9
    COUNTERATTACK = 10
    FAKE = 11
    HIT = 12

    @property
    def token(self) -> str:
        return _MOVE_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "MoveLabel":
        try:
            return _MOVE_FROM_TOKEN[token.strip().lower()]
        except KeyError:
            valid = ", ".join(m.token for m in cls)
            raise ValueError(f"unknown move name {token!r}; valid names: {valid}") from None

    @property
    def index(self) -> int:
        """Zero-based position in probability vectors and target arrays."""
        return self.value - 1


_MOVE_TOKENS = {
    MoveLabel.STEP_FORWARD: "step_forward",
    MoveLabel.STEP_BACKWARD: "step_backward",
    MoveLabel.HALF_STEP_FORWARD: "half_step_forward",
    MoveLabel.HALF_STEP_BACKWARD: "half_step_backward",
    MoveLabel.LUNGE: "lunge",
    MoveLabel.FLECHE: "fleche",
    MoveLabel.WAIT: "wait",
    MoveLabel.PARRY: "parry",
    MoveLabel.BEAT: "beat",
    MoveLabel.COUNTERATTACK: "counterattack",
    MoveLabel.FAKE: "fake",
    MoveLabel.HIT: "hit",
}
_MOVE_FROM_TOKEN = {token: move for move, token in _MOVE_TOKENS.items()}

NUM_MOVES = len(MoveLabel)


class BladeLine(IntEnum):
    """Blade-line position; integer value doubles as the classifier head index."""

    FOUR = 0
    SIX = 1
    SEVEN = 2
    EIGHT = 3
    OTHER = 4

    @property
    def token(self) -> str:
        return _BLADE_TOKENS[self]

    @classmethod
    def from_token(cls, token: str) -> "BladeLine":
        try:
            return _BLADE_FROM_TOKEN[token.strip().lower()]
        except KeyError:
            valid = ", ".join(b.token for b in cls)
            raise ValueError(f"unknown blade position {token!r}; valid values: {valid}") from None


_BLADE_TOKENS = {
    BladeLine.FOUR: "4",
    BladeLine.SIX: "6",
    BladeLine.SEVEN: "7",
    BladeLine.EIGHT: "8",
    BladeLine.OTHER: "other",
}
_BLADE_FROM_TOKEN = {token: blade for blade, token in _BLADE_TOKENS.items()}

NUM_BLADES = len(BladeLine)


@dataclass(frozen=True)
class AnnotationSegment:
    """One labeled interval: a non-empty move set plus a blade line.

    Overlapping moves share a segment spanning the longer action, so the
    move field is a set rather than a single label.
    """

    start_frame: int
    end_frame: int
    moves: frozenset[MoveLabel]
    blade: BladeLine

    def __post_init__(self):
        object.__setattr__(self, "moves", frozenset(MoveLabel(m) for m in self.moves))
        object.__setattr__(self, "blade", BladeLine(self.blade))
        if self.start_frame > self.end_frame:
            raise ValueError(
                f"segment end {self.end_frame} precedes start {self.start_frame}"
            )
        if not self.moves:
            raise ValueError("segment must carry at least one move label")

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame + 1

    def moves_token(self) -> str:
        return "+".join(m.token for m in sorted(self.moves))


@dataclass(frozen=True)
class AnnotatedSequence:
    """All labeled segments for one fencer of one clip, sorted by start."""

    clip_id: str
    side: Side
    segments: tuple[AnnotationSegment, ...]

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        segments = tuple(self.segments)
        starts = [s.start_frame for s in segments]
        if starts != sorted(starts):
            raise ValueError("segments must be sorted by start_frame")
        if len(set(starts)) != len(starts):
            raise ValueError("segments must not share a start frame")
        object.__setattr__(self, "segments", segments)


@dataclass(frozen=True)
class TranscriptEvent:
    """One timeline event of an exchange, tagged with the acting fencer."""

    side: Side
    start_frame: int
    end_frame: int
    moves: frozenset[MoveLabel]
    blade: BladeLine
    confidence: float | None = None


@dataclass(frozen=True)
class ExchangeTranscript:
    """Both fencers' events merged on the shared time axis."""

    clip_id: str
    events: tuple[TranscriptEvent, ...]

    def side_events(self, side: Side) -> tuple[TranscriptEvent, ...]:
        return tuple(e for e in self.events if e.side is side)

    def swapped(self) -> "ExchangeTranscript":
        """Mirror the exchange: every event's side flips, order re-derived."""
        flipped = [
            TranscriptEvent(e.side.opposite, e.start_frame, e.end_frame, e.moves, e.blade, e.confidence)
            for e in self.events
        ]
        flipped.sort(key=lambda e: (e.start_frame, 0 if e.side is Side.LEFT else 1))
        return ExchangeTranscript(self.clip_id, tuple(flipped))


# ---------------------------------------------------------------------------
# Pose files (JSON Lines)
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, path, line_number: int):
    if key not in obj:
        raise ParseError(path, line_number, f"missing required field {key!r}", field_name=key)
    return obj[key]


def parse_pose_file(path) -> PoseFile:
    """Parse a JSON-Lines pose file into frames sorted by frame index.

    The first line may be a header object carrying clip_id/width/height/fps;
    without it the clip metadata stays unknown (and mirroring is impossible).
    Malformed lines raise :class:`ParseError` citing the line number and
    field; a non-monotonic frame index raises :class:`StructureError`.
    """
    path = Path(path)
    frames: list[PoseFrame] = []
    clip_id, width, height, fps = "", None, None, None
    last_index = -1
    with path.open("r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_number, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_number, "expected a JSON object")
            if "frame" not in obj:
                if line_number == 1 and "clip_id" in obj:
                    clip_id = str(obj["clip_id"])
                    width = int(_require(obj, "width", path, line_number))
                    height = int(_require(obj, "height", path, line_number))
                    fps = float(_require(obj, "fps", path, line_number))
                    continue
                raise ParseError(path, line_number, "missing required field 'frame'", field_name="frame")
            frame_index = int(_require(obj, "frame", path, line_number))
            if frame_index <= last_index:
                raise StructureError(
                    f"{path}:{line_number}: frame index {frame_index} is not strictly "
                    f"increasing (previous {last_index})"
                )
            last_index = frame_index
            candidates = []
            for cand in _require(obj, "candidates", path, line_number):
                bbox_raw = _require(cand, "bbox", path, line_number)
                if len(bbox_raw) != 5:
                    raise ParseError(path, line_number, "bbox must be [x0, y0, x1, y1, conf]", field_name="bbox")
                joints_raw = _require(cand, "joints", path, line_number)
                if len(joints_raw) != NUM_JOINTS:
                    raise ParseError(
                        path, line_number, f"expected 17 joints, got {len(joints_raw)}", field_name="joints"
                    )
                bbox = BoundingBox(*(float(v) for v in bbox_raw))
                skeleton = Skeleton17(np.asarray(joints_raw, dtype=np.float64))
                candidates.append((bbox, skeleton))
            frames.append(PoseFrame(frame_index, tuple(candidates)))
    return PoseFile(tuple(frames), clip_id=clip_id, width=width, height=height, fps=fps)


def write_pose_file(path, pose_file: PoseFile) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if pose_file.width is not None and pose_file.height is not None:
            header = {
                "clip_id": pose_file.clip_id,
                "width": pose_file.width,
                "height": pose_file.height,
                "fps": pose_file.fps if pose_file.fps is not None else 25.0,
            }
            fh.write(json.dumps(header) + "\n")
        for frame in pose_file.frames:
            obj = {
                "frame": frame.frame_index,
                "candidates": [
                    {
                        "bbox": [b.x_min, b.y_min, b.x_max, b.y_max, b.confidence],
                        "joints": s.joints.tolist(),
                    }
                    for b, s in frame.candidates
                ],
            }
            fh.write(json.dumps(obj) + "\n")


def track_to_pose_file(track: PoseTrack) -> PoseFile:
    """Encode a track as a pose file with exactly one candidate per frame.

    The candidate bbox confidence doubles as the presence flag (1.0 when the
    frame had a real detection, 0.0 when the pose is held), keeping the
    round trip within the standard pose schema.
    """
    frames = []
    for frame_index, skeleton, present in track.frames():
        xy = skeleton.joints[:, :2]
        bbox = BoundingBox(
            float(xy[:, 0].min()), float(xy[:, 1].min()),
            float(xy[:, 0].max()), float(xy[:, 1].max()),
            1.0 if present else 0.0,
        )
        frames.append(PoseFrame(frame_index, ((bbox, skeleton),)))
    width, height = track.frame_size if track.frame_size else (None, None)
    return PoseFile(tuple(frames), clip_id=track.clip_id, width=width, height=height, fps=25.0)


def pose_file_to_track(pose_file: PoseFile, side: Side, mirrored: bool = False) -> PoseTrack:
    """Rebuild a single-fencer track from its pose-file encoding."""
    if not pose_file.frames:
        raise ValueError("cannot build a track from an empty pose file")
    for frame in pose_file.frames:
        if len(frame.candidates) != 1:
            raise ValueError(
                f"track files carry exactly one candidate per frame; frame "
                f"{frame.frame_index} has {len(frame.candidates)}"
            )
    start = pose_file.frames[0].frame_index
    end = pose_file.frames[-1].frame_index
    if end - start + 1 != len(pose_file.frames):
        raise ValueError("track frames must be contiguous")
    joints = np.stack([frame.candidates[0][1].joints for frame in pose_file.frames])
    present = np.array([frame.candidates[0][0].confidence > 0.0 for frame in pose_file.frames])
    return PoseTrack(
        clip_id=pose_file.clip_id,
        side=side,
        start_frame=start,
        joints=joints,
        present=present,
        frame_size=pose_file.frame_size,
        mirrored=mirrored,
    )


# ---------------------------------------------------------------------------
# Mirroring
# ---------------------------------------------------------------------------


def mirror_track(track: PoseTrack) -> PoseTrack:
    """Flip a track about the frame's vertical midline.

    Every x maps to W - x, anatomically symmetric joints swap so the
    fencer's left side stays their left side, and the view flag toggles.
    The operation is a bit-exact involution on grid-snapped coordinates.
    """
    if track.frame_size is None:
        raise ValueError("cannot mirror a track with unknown frame_size")
    width = float(track.frame_size[0])
    joints = np.array(track.joints)
    joints[:, :, 0] = width - joints[:, :, 0]
    for a, b in MIRROR_SWAP_PAIRS:
        joints[:, [a, b]] = joints[:, [b, a]]
    return PoseTrack(
        clip_id=track.clip_id,
        side=track.side,
        start_frame=track.start_frame,
        joints=joints,
        present=np.array(track.present),
        frame_size=track.frame_size,
        mirrored=not track.mirrored,
    )


def to_canonical_left_view(track: PoseTrack) -> PoseTrack:
    """Mirror right-side tracks so every fencer faces right from the left."""
    return track if track.canonical_left_view else mirror_track(track)


# ---------------------------------------------------------------------------
# Annotation CSV
# ---------------------------------------------------------------------------

_ANNOTATION_FIELDS = ("clip_id", "side", "start_frame", "end_frame", "moves", "blade")


def parse_annotations(path) -> list[AnnotatedSequence]:
    """Parse the annotation CSV into per-(clip, side) sequences.

    Rows may arrive in any order; segments are grouped by (clip_id, side)
    and sorted by start frame. Move names are validated against the
    twelve-token vocabulary, blade values against {4, 6, 7, 8, other}.
    """
    path = Path(path)
    grouped: dict[tuple[str, Side], list[AnnotationSegment]] = {}
    order: list[tuple[str, Side]] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for line_number, row in enumerate(reader, start=1):
            if not row or (line_number == 1 and row[:2] == ["clip_id", "side"]):
                continue
            if len(row) != len(_ANNOTATION_FIELDS):
                raise ParseError(
                    path, line_number,
                    f"expected {len(_ANNOTATION_FIELDS)} columns {_ANNOTATION_FIELDS}, got {len(row)}",
                )
            clip_id, side_raw, start_raw, end_raw, moves_raw, blade_raw = row
            try:
                side = Side(side_raw.strip().lower())
                start = int(start_raw)
                end = int(end_raw)
                moves = frozenset(MoveLabel.from_token(tok) for tok in moves_raw.split("+"))
                blade = BladeLine.from_token(blade_raw)
                segment = AnnotationSegment(start, end, moves, blade)
            except ValueError as exc:
                raise ParseError(path, line_number, str(exc)) from exc
            key = (clip_id, side)
            if key not in grouped:
                grouped[key] = []
                order.append(key)
            grouped[key].append(segment)
    sequences = []
    for key in order:
        clip_id, side = key
        segments = sorted(grouped[key], key=lambda s: s.start_frame)
        sequences.append(AnnotatedSequence(clip_id, side, tuple(segments)))
    return sequences


def write_annotations(path, sequences: Iterable[AnnotatedSequence]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ANNOTATION_FIELDS)
        for seq in sequences:
            for seg in seq.segments:
                writer.writerow(
                    [seq.clip_id, seq.side.value, seg.start_frame, seg.end_frame,
                     seg.moves_token(), seg.blade.token]
                )


# ---------------------------------------------------------------------------
# Timeline alignment
# ---------------------------------------------------------------------------


def _events_of(timeline) -> list[TranscriptEvent]:
    side = Side(timeline.side)
    events = []
    if hasattr(timeline, "segments"):
        for seg in timeline.segments:
            events.append(TranscriptEvent(side, seg.start_frame, seg.end_frame, seg.moves, seg.blade))
    elif hasattr(timeline, "actions"):
        for act in timeline.actions:
            conf = max(act.moves.values()) if act.moves else None
            events.append(
                TranscriptEvent(side, act.start_frame, act.end_frame,
                                frozenset(act.moves), act.blade, conf)
            )
    else:
        raise TypeError(f"cannot extract events from {type(timeline).__name__}")
    return events


def align_pair(left, right) -> ExchangeTranscript:
    """Merge a left and a right fencer timeline on the shared time axis.

    Accepts :class:`AnnotatedSequence` or any timeline exposing ``actions``
    (detected-action timelines). Events are ordered by start frame with ties
    broken left before right.
    """
    if left.clip_id != right.clip_id:
        raise ValueError(f"clip_id mismatch: {left.clip_id!r} vs {right.clip_id!r}")
    if Side(left.side) is not Side.LEFT or Side(right.side) is not Side.RIGHT:
        raise ValueError("align_pair expects a left timeline and a right timeline")
    events = _events_of(left) + _events_of(right)
    events.sort(key=lambda e: (e.start_frame, 0 if e.side is Side.LEFT else 1))
    return ExchangeTranscript(left.clip_id, tuple(events))
