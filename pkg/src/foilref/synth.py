"""Parametric two-fencer motion generator with ground-truth labels.

Each move has a hand-authored piecewise-linear template in torso units;
scripts chain templates into a bout, the right fencer is built in the
canonical view and mirrored into place, and the ground-truth transcript is
refereed by the rule engine. Realism is not the point: the templates give
every class distinct, label-consistent geometry so learnability and
pipeline tests have a known answer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    COCO_JOINT_NAMES,
    AnnotatedSequence,
    AnnotationSegment,
    BladeLine,
    BoundingBox,
    MoveLabel,
    PoseFile,
    PoseFrame,
    PoseTrack,
    Side,
    Skeleton17,
    align_pair,
    mirror_track,
)
from .referee import Verdict, evaluate_priority
from .validation import check_seed_rng

_JOINT_INDEX = {name: i for i, name in enumerate(COCO_JOINT_NAMES)}

# En-garde base pose in torso units: pelvis at the origin, image y down,
# fencer facing +x with the weapon (right) arm forward.
_BASE_POSE = {
    "nose": (0.12, -1.32),
    "left_eye": (0.08, -1.38),
    "right_eye": (0.16, -1.38),
    "left_ear": (0.02, -1.35),
    "right_ear": (0.20, -1.33),
    "left_shoulder": (-0.14, -1.00),
    "right_shoulder": (0.18, -1.00),
    "left_elbow": (-0.30, -0.70),
    "right_elbow": (0.44, -0.86),
    "left_wrist": (-0.38, -0.48),
    "right_wrist": (0.72, -0.82),
    "left_hip": (-0.10, 0.00),
    "right_hip": (0.10, 0.00),
    "left_knee": (-0.32, 0.55),
    "right_knee": (0.38, 0.55),
    "left_ankle": (-0.52, 1.05),
    "right_ankle": (0.62, 1.05),
}

# Guard offsets applied to the weapon wrist for the duration of a segment,
# one per blade line, so the blade head has learnable signal.
_BLADE_OFFSETS = {
    BladeLine.FOUR: (-0.05, -0.15),
    BladeLine.SIX: (0.0, 0.0),
    BladeLine.SEVEN: (-0.02, 0.14),
    BladeLine.EIGHT: (0.03, 0.20),
    BladeLine.OTHER: (-0.12, -0.06),
}

Keyframes = tuple[tuple[float, dict[str, tuple[float, float]]], ...]


@dataclass(frozen=True)
class MotionTemplate:
    """One move's trajectory: pelvis advance plus joint offset keyframes."""

    move: MoveLabel
    duration_range: tuple[int, int]
    advance: float  # total pelvis x translation in torso units
    offsets: Keyframes = ((0.0, {}), (1.0, {}))
    advance_profile: tuple[tuple[float, float], ...] = ((0.0, 0.0), (1.0, 1.0))

    def __post_init__(self):
        lo, hi = self.duration_range
        if not (4 <= lo <= hi <= 40):
            raise ValueError(f"{self.move.token}: durations must lie in [4, 40]")


def _kf(*frames) -> Keyframes:
    return tuple(frames)


TEMPLATES: dict[MoveLabel, MotionTemplate] = {
    MoveLabel.STEP_FORWARD: MotionTemplate(
        MoveLabel.STEP_FORWARD,
        (8, 14),
        advance=0.50,
        offsets=_kf(
            (0.0, {}),
            (0.4, {"right_ankle": (0.26, -0.08)}),
            (0.7, {"right_ankle": (0.10, 0.0), "left_ankle": (0.12, -0.06)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.STEP_BACKWARD: MotionTemplate(
        MoveLabel.STEP_BACKWARD,
        (8, 14),
        advance=-0.50,
        offsets=_kf(
            (0.0, {}),
            (0.4, {"left_ankle": (-0.26, -0.08)}),
            (0.7, {"left_ankle": (-0.10, 0.0), "right_ankle": (-0.12, -0.06)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.HALF_STEP_FORWARD: MotionTemplate(
        MoveLabel.HALF_STEP_FORWARD,
        (4, 6),
        advance=0.22,
        offsets=_kf((0.0, {}), (0.5, {"right_ankle": (0.14, -0.05)}), (1.0, {})),
    ),
    MoveLabel.HALF_STEP_BACKWARD: MotionTemplate(
        MoveLabel.HALF_STEP_BACKWARD,
        (4, 6),
        advance=-0.22,
        offsets=_kf((0.0, {}), (0.5, {"left_ankle": (-0.14, -0.05)}), (1.0, {})),
    ),
    MoveLabel.LUNGE: MotionTemplate(
        MoveLabel.LUNGE,
        (30, 38),
        advance=0.95,
        advance_profile=((0.0, 0.0), (0.3, 0.12), (0.8, 0.95), (1.0, 1.0)),
        offsets=_kf(
            (0.0, {}),
            (0.35, {"right_wrist": (0.28, -0.04), "right_elbow": (0.12, -0.02)}),
            (
                0.75,
                {
                    "right_wrist": (0.50, -0.06),
                    "right_elbow": (0.26, -0.04),
                    "right_ankle": (0.50, 0.02),
                    "left_knee": (0.06, -0.10),
                },
            ),
            (1.0, {}),
        ),
    ),
    MoveLabel.FLECHE: MotionTemplate(
        MoveLabel.FLECHE,
        (14, 22),
        advance=1.50,
        advance_profile=((0.0, 0.0), (0.4, 0.2), (1.0, 1.0)),
        offsets=_kf(
            (0.0, {}),
            (0.5, {"right_wrist": (0.45, -0.05), "left_ankle": (0.70, -0.12), "right_ankle": (0.08, 0.0)}),
            (0.8, {"right_wrist": (0.40, -0.04), "left_ankle": (0.30, -0.04)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.WAIT: MotionTemplate(
        MoveLabel.WAIT,
        (8, 20),
        advance=0.0,
        offsets=_kf(
            (0.0, {}),
            (0.5, {"left_knee": (0.0, 0.03), "right_knee": (0.0, 0.03), "left_hip": (0.0, 0.02), "right_hip": (0.0, 0.02)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.PARRY: MotionTemplate(
        MoveLabel.PARRY,
        (5, 9),
        advance=0.0,
        offsets=_kf(
            (0.0, {}),
            (0.5, {"right_wrist": (-0.24, -0.12), "right_elbow": (-0.10, -0.05)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.BEAT: MotionTemplate(
        MoveLabel.BEAT,
        (4, 8),
        advance=0.0,
        offsets=_kf((0.0, {}), (0.45, {"right_wrist": (0.18, -0.03)}), (0.75, {"right_wrist": (0.05, 0.0)}), (1.0, {})),
    ),
    MoveLabel.COUNTERATTACK: MotionTemplate(
        MoveLabel.COUNTERATTACK,
        (8, 14),
        advance=0.10,
        offsets=_kf(
            (0.0, {}),
            (0.55, {"right_wrist": (0.50, -0.08), "right_elbow": (0.25, -0.04)}),
            (1.0, {}),
        ),
    ),
    MoveLabel.FAKE: MotionTemplate(
        MoveLabel.FAKE,
        (6, 10),
        advance=0.05,
        offsets=_kf((0.0, {}), (0.5, {"right_wrist": (0.30, -0.05)}), (1.0, {})),
    ),
    MoveLabel.HIT: MotionTemplate(
        MoveLabel.HIT,
        (4, 10),
        advance=0.15,
        offsets=_kf(
            (0.0, {}),
            (0.6, {"right_wrist": (0.55, -0.08), "right_elbow": (0.30, -0.05)}),
            (0.9, {"right_wrist": (0.50, -0.07), "right_elbow": (0.27, -0.04)}),
            (1.0, {}),
        ),
    ),
}


@dataclass(frozen=True)
class ScriptStep:
    """One scripted segment: one or more overlapping moves and a blade line."""

    moves: tuple[MoveLabel, ...]
    blade: BladeLine = BladeLine.SIX
    duration: int | None = None  # None: sampled from the first move's range

    def __post_init__(self):
        if not self.moves:
            raise ValueError("a script step needs at least one move")
        object.__setattr__(self, "moves", tuple(MoveLabel(m) for m in self.moves))
        object.__setattr__(self, "blade", BladeLine(self.blade))
        if self.duration is not None and not (4 <= self.duration <= 40):
            raise ValueError("step duration must lie in [4, 40]")


def step(*moves: MoveLabel, blade: BladeLine = BladeLine.SIX, duration: int | None = None) -> ScriptStep:
    return ScriptStep(tuple(moves), blade, duration)


@dataclass(frozen=True)
class SynthClipSpec:
    clip_id: str
    seed: int
    left_script: tuple[ScriptStep, ...]
    right_script: tuple[ScriptStep, ...]
    noise_sigma: float = 0.0  # pixel noise on emitted candidates
    occlusion_probability: float = 0.0
    occlusion_frames: tuple[int, int] | None = None
    distractor: bool = False
    frame_size: tuple[int, int] = (1280, 720)
    scale: float = 140.0  # pixels per torso unit
    start_x: float = 320.0  # canonical pelvis x at frame 0
    baseline_y: float = 396.0  # pelvis y

    def __post_init__(self):
        if not self.left_script or not self.right_script:
            raise ValueError("both scripts must be non-empty")
        object.__setattr__(self, "left_script", tuple(self.left_script))
        object.__setattr__(self, "right_script", tuple(self.right_script))


@dataclass(frozen=True)
class Bout:
    """A generated exchange: ground-truth tracks, labels, and verdict."""

    spec: SynthClipSpec
    left_track: PoseTrack
    right_track: PoseTrack
    left_annotations: AnnotatedSequence
    right_annotations: AnnotatedSequence
    verdict: Verdict
    observed_left: np.ndarray  # (T, 17, 3) candidate joints incl. noise
    observed_right: np.ndarray
    occluded: np.ndarray  # (T,) bool: frames without candidates

    def pose_file(self) -> PoseFile:
        """Emit the bout as a raw pose file for the tracker to consume."""
        width, height = self.spec.frame_size
        frames = []
        n = self.observed_left.shape[0]
        for t in range(n):
            candidates = []
            if not self.occluded[t]:
                for joints in (self.observed_left[t], self.observed_right[t]):
                    skeleton = Skeleton17(joints)
                    candidates.append((_skeleton_bbox(skeleton), skeleton))
                if self.spec.distractor:
                    candidates.append(_distractor_candidate(self.spec))
            frames.append(PoseFrame(t, tuple(candidates)))
        return PoseFile(
            tuple(frames), clip_id=self.spec.clip_id, width=width, height=height, fps=25.0
        )


def _skeleton_bbox(skeleton: Skeleton17, margin: float = 8.0, confidence: float = 0.95) -> BoundingBox:
    xy = skeleton.joints[:, :2]
    return BoundingBox(
        float(xy[:, 0].min() - margin),
        float(xy[:, 1].min() - margin),
        float(xy[:, 0].max() + margin),
        float(xy[:, 1].max() + margin),
        confidence,
    )


def _distractor_candidate(spec: SynthClipSpec) -> tuple[BoundingBox, Skeleton17]:
    """A referee-like torso at the bottom edge, to exercise candidate gating."""
    width, height = spec.frame_size
    cx = width / 2.0
    joints = np.zeros((17, 3))
    base = np.array([(x, y) for x, y in _BASE_POSE.values()])
    joints[:, :2] = base * 90.0 + (cx, height - 40.0)
    joints[:, 2] = 0.9
    skeleton = Skeleton17(joints)
    xy = skeleton.joints[:, :2]
    bbox = BoundingBox(
        float(xy[:, 0].min() - 5), float(xy[:, 1].min() - 5), float(xy[:, 0].max() + 5),
        float(height), 0.9,
    )
    return (bbox, skeleton)


def _interp_offsets(keyframes: Keyframes, phase: float) -> dict[str, np.ndarray]:
    """Piecewise-linear interpolation of joint offsets at a phase in [0, 1]."""
    out: dict[str, np.ndarray] = {}
    joints = {name for _, offs in keyframes for name in offs}
    phases = [p for p, _ in keyframes]
    for name in joints:
        values = np.array([offs.get(name, (0.0, 0.0)) for _, offs in keyframes])
        out[name] = np.array(
            [np.interp(phase, phases, values[:, k]) for k in range(2)]
        )
    return out


def _interp_advance(profile, phase: float) -> float:
    phases = [p for p, _ in profile]
    fracs = [f for _, f in profile]
    return float(np.interp(phase, phases, fracs))


def _render_script(
    script: tuple[ScriptStep, ...], durations: list[int], spec: SynthClipSpec
) -> tuple[np.ndarray, list[AnnotationSegment]]:
    """Canonical-view pixel joints for one side, plus its label segments."""
    total = sum(durations)
    joints = np.zeros((total, 17, 3))
    joints[:, :, 2] = 1.0
    segments = []
    base = np.array([_BASE_POSE[name] for name in COCO_JOINT_NAMES])
    t = 0
    advance_done = 0.0
    for step_spec, duration in zip(script, durations):
        templates = [TEMPLATES[m] for m in step_spec.moves]
        step_advance = sum(tpl.advance for tpl in templates)
        blade_off = np.array(_BLADE_OFFSETS[step_spec.blade])
        for k in range(duration):
            phase = k / (duration - 1) if duration > 1 else 0.0
            pose = np.array(base)
            adv = 0.0
            for tpl in templates:
                for name, off in _interp_offsets(tpl.offsets, phase).items():
                    pose[_JOINT_INDEX[name]] += off
                adv += tpl.advance * _interp_advance(tpl.advance_profile, phase)
            pose[_JOINT_INDEX["right_wrist"]] += blade_off
            pose[:, 0] += advance_done + adv
            joints[t + k, :, 0] = spec.start_x + pose[:, 0] * spec.scale
            joints[t + k, :, 1] = spec.baseline_y + pose[:, 1] * spec.scale
        advance_done += step_advance
        segments.append(
            AnnotationSegment(t, t + duration - 1, frozenset(step_spec.moves), step_spec.blade)
        )
        t += duration
    return joints, segments


def generate_bout(spec: SynthClipSpec) -> Bout:
    """Deterministically build a bout from its spec.

    The left fencer renders directly in the canonical view; the right
    fencer renders canonically and is mirrored into the original view, so
    mirroring it back reproduces the canonical geometry bit-exactly.
    The verdict comes from the rule engine over the ground-truth transcript.
    """
    rng = check_seed_rng(spec.seed)
    durations = {}
    for side, script in ((Side.LEFT, spec.left_script), (Side.RIGHT, spec.right_script)):
        durations[side] = [
            s.duration
            if s.duration is not None
            else int(rng.integers(TEMPLATES[s.moves[0]].duration_range[0],
                                  TEMPLATES[s.moves[0]].duration_range[1] + 1))
            for s in script
        ]
    left_joints, left_segments = _render_script(spec.left_script, durations[Side.LEFT], spec)
    right_joints, right_segments = _render_script(spec.right_script, durations[Side.RIGHT], spec)

    n = max(left_joints.shape[0], right_joints.shape[0])
    left_joints = _pad_hold(left_joints, n)
    right_joints = _pad_hold(right_joints, n)

    left_track = PoseTrack(
        clip_id=spec.clip_id, side=Side.LEFT, start_frame=0, joints=left_joints,
        present=np.ones(n, dtype=bool), frame_size=spec.frame_size,
    )
    right_canonical = PoseTrack(
        clip_id=spec.clip_id, side=Side.RIGHT, start_frame=0, joints=right_joints,
        present=np.ones(n, dtype=bool), frame_size=spec.frame_size, mirrored=True,
    )
    right_track = mirror_track(right_canonical)

    left_ann = AnnotatedSequence(spec.clip_id, Side.LEFT, tuple(left_segments))
    right_ann = AnnotatedSequence(spec.clip_id, Side.RIGHT, tuple(right_segments))
    verdict = evaluate_priority(align_pair(left_ann, right_ann))

    observed_left = np.array(left_track.joints)
    observed_right = np.array(right_track.joints)
    if spec.noise_sigma > 0.0:
        observed_left[:, :, :2] += rng.normal(0.0, spec.noise_sigma, (n, 17, 2))
        observed_right[:, :, :2] += rng.normal(0.0, spec.noise_sigma, (n, 17, 2))
    occluded = np.zeros(n, dtype=bool)
    if spec.occlusion_probability > 0.0:
        lo, hi = spec.occlusion_frames if spec.occlusion_frames else (0, n - 1)
        window = np.arange(n)
        in_window = (window >= lo) & (window <= hi)
        occluded = in_window & (rng.random(n) < spec.occlusion_probability)

    return Bout(
        spec=spec,
        left_track=left_track,
        right_track=right_track,
        left_annotations=left_ann,
        right_annotations=right_ann,
        verdict=verdict,
        observed_left=observed_left,
        observed_right=observed_right,
        occluded=occluded,
    )


def _pad_hold(joints: np.ndarray, n: int) -> np.ndarray:
    if joints.shape[0] >= n:
        return joints
    pad = np.repeat(joints[-1:], n - joints.shape[0], axis=0)
    return np.concatenate([joints, pad], axis=0)


def corrupt(track: PoseTrack, noise_sigma: float, dropout_p: float, seed: int) -> PoseTrack:
    """Degrade a track: Gaussian pixel noise plus per-frame dropout.

    Dropped frames flip present to False; coordinates stay so downstream
    hold-last behaviour can be exercised.
    """
    if noise_sigma < 0.0 or not 0.0 <= dropout_p <= 1.0:
        raise ValueError("noise_sigma must be >= 0 and dropout_p in [0, 1]")
    rng = check_seed_rng(seed)
    joints = np.array(track.joints)
    if noise_sigma > 0.0:
        joints[:, :, :2] += rng.normal(0.0, noise_sigma, joints[:, :, :2].shape)
    present = np.array(track.present)
    if dropout_p > 0.0:
        present &= rng.random(len(track)) >= dropout_p
    return PoseTrack(
        clip_id=track.clip_id,
        side=track.side,
        start_frame=track.start_frame,
        joints=joints,
        present=present,
        frame_size=track.frame_size,
        mirrored=track.mirrored,
    )


def random_script(
    rng: np.random.Generator,
    n_steps: int,
    move_pool: tuple[MoveLabel, ...] | None = None,
    multi_label_p: float = 0.25,
) -> tuple[ScriptStep, ...]:
    """Sample a plausible script; overlapping moves pair footwork with blade work."""
    pool = move_pool or tuple(MoveLabel)
    combinable = (MoveLabel.BEAT, MoveLabel.HIT, MoveLabel.FAKE)
    steps = []
    for _ in range(n_steps):
        move = pool[int(rng.integers(len(pool)))]
        moves = (move,)
        if rng.random() < multi_label_p and move not in combinable:
            extra = combinable[int(rng.integers(len(combinable)))]
            moves = (move, extra)
        blade = BladeLine(int(rng.integers(5)))
        steps.append(ScriptStep(moves, blade))
    return tuple(steps)
