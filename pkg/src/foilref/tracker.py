"""Fencer selection and identity tracking over pose-frame candidates.

The tracker admits large, well-placed person detections, locks onto the two
best candidates during an initial grace period, then follows them with a
cost built from bounding-box IoU and centroid distance. Lost identities are
recovered by matching against the last known box, guarded by a pose
similarity cap so the track does not jump to bystanders. An exponential
moving average smooths joint trajectories and carries poses through gaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import BoundingBox, PoseFile, PoseFrame, PoseTrack, Side, Skeleton17
from .features import normalize_skeleton


@dataclass
class TrackerConfig:
    min_area_fraction: float = 0.03
    min_bbox_confidence: float = 0.20
    grace_frames: int = 12
    area_weight: float = 0.7
    vertical_weight: float = 0.3
    iou_weight: float = 0.5
    centroid_weight: float = 0.5
    gate: float = 0.8
    reassign_min_iou: float = 0.05
    pose_similarity_cap: float = 0.5
    ema_lambda: float = 0.6
    min_track_separation: float = 0.10  # fraction of frame width between seeds


@dataclass(frozen=True)
class Candidate:
    bbox: BoundingBox
    skeleton: Skeleton17
    area_fraction: float
    score: float

    def sort_key(self) -> tuple:
        # Geometry-based key so ordering never depends on input order.
        b = self.bbox
        return (-self.score, b.x_min, b.y_min, b.x_max, b.y_max)


@dataclass
class TrackState:
    track_id: int
    last_bbox: BoundingBox
    last_skeleton: Skeleton17
    ema_joints: np.ndarray  # (17, 2)
    last_confidences: np.ndarray  # (17,)
    frames_missing: int = 0


def filter_candidates(
    frame: PoseFrame,
    frame_size: tuple[int, int],
    grace_active: bool,
    config: TrackerConfig | None = None,
) -> list[Candidate]:
    """Gate and score this frame's detections.

    Candidates must cover at least 3% of the frame and clear the box
    confidence floor. During the selection grace period, boxes touching the
    bottom edge are also rejected (referees filmed torso-up sit there); once
    the fencers are locked, a low lunge clipping the bottom edge must not
    drop the track, so that gate only applies while ``grace_active``.
    Survivors are scored by size and vertical placement, best first.
    """
    config = config or TrackerConfig()
    width, height = frame_size
    if width <= 0 or height <= 0:
        raise ValueError("frame_size must be positive")
    frame_area = float(width) * float(height)
    kept = []
    for bbox, skeleton in frame.candidates:
        area_fraction = bbox.area / frame_area
        if area_fraction < config.min_area_fraction:
            continue
        if bbox.confidence <= config.min_bbox_confidence:
            continue
        if grace_active and bbox.y_max >= height:
            continue
        vertical = bbox.center[1] / height  # higher score when lower in frame
        score = config.area_weight * area_fraction + config.vertical_weight * vertical
        kept.append(Candidate(bbox, skeleton, area_fraction, score))
    kept.sort(key=Candidate.sort_key)
    return kept


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; zero-area unions give 0."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def association_distance(
    track: TrackState,
    candidate: Candidate,
    frame_diagonal: float,
    config: TrackerConfig | None = None,
) -> float:
    """Matching cost: weighted (1 - IoU) plus normalized centroid distance."""
    config = config or TrackerConfig()
    tx, ty = track.last_bbox.center
    cx, cy = candidate.bbox.center
    centroid = math.hypot(cx - tx, cy - ty) / frame_diagonal
    return config.iou_weight * (1.0 - iou(track.last_bbox, candidate.bbox)) + (
        config.centroid_weight * centroid
    )


def pose_similarity(a: Skeleton17, b: Skeleton17) -> float:
    """Mean body-joint distance in torso units after pelvis-centering.

    Returns inf when either skeleton cannot be normalized, which vetoes
    reassignment.
    """
    na = normalize_skeleton(a.joints)
    nb = normalize_skeleton(b.joints)
    if na is None or nb is None:
        return float("inf")
    return float(np.mean(np.linalg.norm(na.coords - nb.coords, axis=1)))


def ema_smooth(state: TrackState, skeleton: Skeleton17 | None, config: TrackerConfig | None = None) -> Skeleton17:
    """Blend an observation into the track's smoothed pose.

    Joints observed with confidence > 0 move toward the observation by the
    EMA factor; unobserved joints (and absent detections) hold the previous
    smoothed position so gaps do not zero out the pose.
    """
    config = config or TrackerConfig()
    lam = config.ema_lambda
    if skeleton is not None:
        obs = skeleton.joints
        observed = obs[:, 2] > 0.0
        state.ema_joints[observed] += lam * (obs[observed, :2] - state.ema_joints[observed])
        state.last_confidences[observed] = obs[observed, 2]
        state.last_skeleton = skeleton
    out = np.empty((17, 3))
    out[:, :2] = state.ema_joints
    out[:, 2] = state.last_confidences
    return Skeleton17(out)


def step_tracker(
    states: list[TrackState],
    candidates: list[Candidate],
    frame_diagonal: float,
    config: TrackerConfig | None = None,
) -> dict[int, tuple[Candidate, float]]:
    """Associate this frame's candidates to the active tracks.

    Greedy minimum-cost assignment over the (tracks x candidates) cost
    matrix, gated so implausible matches are refused; with at most two
    tracks the gated greedy solution coincides with the optimal matching.
    Tracks missing for a frame or more may additionally be recovered via
    IoU against the last known box, accepted only when pose similarity
    stays under the cap. Returns {track_id: (candidate, cost)}; unmatched
    tracks have ``frames_missing`` incremented.
    """
    if len(states) > 2:
        raise ValueError("at most two tracks are supported")
    config = config or TrackerConfig()
    assignments: dict[int, tuple[Candidate, float]] = {}
    free = sorted(candidates, key=Candidate.sort_key)
    pairs = []
    for state in states:
        for cand in free:
            cost = association_distance(state, cand, frame_diagonal, config)
            pairs.append((cost, state.track_id, cand))
    pairs.sort(key=lambda p: (p[0], p[1], p[2].sort_key()))
    taken_tracks: set[int] = set()
    taken_cands: list[Candidate] = []
    for cost, track_id, cand in pairs:
        if cost > config.gate or track_id in taken_tracks or any(cand is c for c in taken_cands):
            continue
        assignments[track_id] = (cand, cost)
        taken_tracks.add(track_id)
        taken_cands.append(cand)

    # Recovery pass for lost tracks: match the last known box by IoU, but
    # refuse candidates whose pose has drifted too far from the track.
    for state in states:
        if state.track_id in taken_tracks or state.frames_missing == 0:
            continue
        best = None
        for cand in free:
            if any(cand is c for c in taken_cands):
                continue
            overlap = iou(state.last_bbox, cand.bbox)
            if overlap < config.reassign_min_iou:
                continue
            if pose_similarity(state.last_skeleton, cand.skeleton) > config.pose_similarity_cap:
                continue
            if best is None or overlap > best[0]:
                best = (overlap, cand)
        if best is not None:
            overlap, cand = best
            assignments[state.track_id] = (cand, 1.0 - overlap)
            taken_tracks.add(state.track_id)
            taken_cands.append(cand)

    for state in states:
        if state.track_id in assignments:
            cand = assignments[state.track_id][0]
            state.last_bbox = cand.bbox
            state.frames_missing = 0
        else:
            state.frames_missing += 1
    return assignments


class FencerTracker:
    """Per-clip tracker producing one smoothed track per fencer.

    Single-threaded per clip: state mutates frame by frame. Distinct clips
    can be tracked in parallel freely.
    """

    def __init__(self, clip_id: str, frame_size: tuple[int, int], config: TrackerConfig | None = None):
        self.clip_id = clip_id
        self.frame_size = frame_size
        self.config = config or TrackerConfig()
        self.states: list[TrackState] = []
        self.report_lines: list[str] = []

    def _seed_track(self, cand: Candidate) -> None:
        state = TrackState(
            track_id=len(self.states),
            last_bbox=cand.bbox,
            last_skeleton=cand.skeleton,
            ema_joints=np.array(cand.skeleton.joints[:, :2]),
            last_confidences=np.array(cand.skeleton.joints[:, 2]),
        )
        self.states.append(state)

    def _try_seed(self, candidates: list[Candidate], frame_index: int) -> None:
        width = self.frame_size[0]
        for cand in candidates:
            if len(self.states) >= 2:
                break
            if any(cand is taken for taken in getattr(self, "_taken_this_frame", [])):
                continue
            cx = cand.bbox.center[0]
            separated = all(
                abs(cx - s.last_bbox.center[0]) >= self.config.min_track_separation * width
                for s in self.states
            )
            if separated:
                self._seed_track(cand)
                self._taken_this_frame.append(cand)
                self.report_lines.append(f"frame {frame_index}: seeded track {len(self.states) - 1}")

    def process(self, pose_file: PoseFile) -> tuple[PoseTrack, PoseTrack, str]:
        """Track the whole clip and emit (left, right) smoothed tracks."""
        frames = {f.frame_index: f for f in pose_file.frames}
        if not frames:
            raise ValueError(f"clip {self.clip_id}: no frames to track")
        first = min(frames)
        last = max(frames)
        n = last - first + 1
        diag = math.hypot(*self.frame_size)

        smoothed: dict[int, list[Skeleton17 | None]] = {0: [], 1: []}
        present: dict[int, list[bool]] = {0: [], 1: []}

        for t in range(first, last + 1):
            frame = frames.get(t)
            grace_active = (t - first) < self.config.grace_frames or len(self.states) < 2
            candidates = (
                filter_candidates(frame, self.frame_size, grace_active, self.config) if frame else []
            )
            self._taken_this_frame = []
            assignments = {}
            if self.states:
                assignments = step_tracker(self.states, candidates, diag, self.config)
                self._taken_this_frame = [cand for cand, _ in assignments.values()]
            if len(self.states) < 2:
                self._try_seed(candidates, t)
            for state in self.states:
                tid = state.track_id
                while len(smoothed[tid]) < (t - first):
                    smoothed[tid].append(None)
                    present[tid].append(False)
                if tid in assignments:
                    cand, cost = assignments[tid]
                    smoothed[tid].append(ema_smooth(state, cand.skeleton, self.config))
                    present[tid].append(True)
                    self.report_lines.append(f"frame {t}: track {tid} matched cost {cost:.4f}")
                else:
                    smoothed[tid].append(ema_smooth(state, None, self.config))
                    present[tid].append(False)
                    self.report_lines.append(f"frame {t}: track {tid} missing")

        if len(self.states) < 2:
            raise ValueError(f"clip {self.clip_id}: could not lock onto two fencers")

        tracks = []
        for tid in (0, 1):
            joints = np.stack([s.joints for s in self._backfill(smoothed[tid])])
            tracks.append((tid, joints, np.array(present[tid], dtype=bool)))

        # Identity by piste side: the track whose mean centroid x is smaller
        # is the left fencer.
        mean_x = [float(np.mean(j[:, :, 0])) for _, j, _ in tracks]
        left_first = mean_x[0] <= mean_x[1]
        ordered = tracks if left_first else tracks[::-1]
        out = []
        for side, (tid, joints, pres) in zip((Side.LEFT, Side.RIGHT), ordered):
            out.append(
                PoseTrack(
                    clip_id=self.clip_id,
                    side=side,
                    start_frame=first,
                    joints=joints,
                    present=pres,
                    frame_size=self.frame_size,
                )
            )
            self.report_lines.append(f"track {tid} -> side {side.value}")
        report = "\n".join(self.report_lines) + "\n"
        return out[0], out[1], report

    @staticmethod
    def _backfill(skeletons: list[Skeleton17 | None]) -> list[Skeleton17]:
        """Fill pre-seed frames with the first real pose (confidence zeroed)."""
        first_real = next(s for s in skeletons if s is not None)
        blank_joints = np.array(first_real.joints)
        blank_joints[:, 2] = 0.0
        blank = Skeleton17(blank_joints)
        return [s if s is not None else blank for s in skeletons]


def track_clip(pose_file: PoseFile, config: TrackerConfig | None = None) -> tuple[PoseTrack, PoseTrack, str]:
    """Convenience wrapper: track a parsed pose file end to end."""
    if pose_file.frame_size is None:
        raise ValueError("pose file lacks a header with frame dimensions")
    tracker = FencerTracker(pose_file.clip_id, pose_file.frame_size, config)
    return tracker.process(pose_file)
