"""Dynamic temporal windowing: continuous feature streams to action timelines.

The scanner grows a window one frame at a time until some move clears its
per-class confidence threshold, emits the detection, and jumps past it; a
window that reaches the cap without confidence slides forward by one frame.
Overlapping detections from the slide path are cleaned up with temporal
non-maximum suppression.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import BladeLine, MoveLabel, Side
from .features import FeatureSequence

W_MAX = 40
W_INITIAL = 1
NMS_OVERLAP_THRESHOLD = 0.5
HALF_STEP_LOOKAHEAD = 12

# Half-step labels and the full step that absorbs them on lookahead.
_HALF_TO_FULL = {
    MoveLabel.HALF_STEP_FORWARD: MoveLabel.STEP_FORWARD,
    MoveLabel.HALF_STEP_BACKWARD: MoveLabel.STEP_BACKWARD,
}


@dataclass(frozen=True)
class DetectedAction:
    """A detected interval with per-move confidences and a blade call."""

    start_frame: int
    end_frame: int
    moves: dict[MoveLabel, float]
    blade: BladeLine
    blade_confidence: float

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError("action end precedes start")
        if self.end_frame - self.start_frame + 1 > W_MAX:
            raise ValueError(f"action longer than {W_MAX} frames")
        object.__setattr__(self, "moves", dict(self.moves))

    @property
    def duration(self) -> int:
        return self.end_frame - self.start_frame + 1

    @property
    def max_confidence(self) -> float:
        return max(self.moves.values()) if self.moves else 0.0

    def label_set(self) -> frozenset[MoveLabel]:
        return frozenset(self.moves)


@dataclass(frozen=True)
class ActionTimeline:
    clip_id: str
    side: Side
    actions: tuple[DetectedAction, ...]

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        starts = [a.start_frame for a in self.actions]
        if starts != sorted(starts):
            raise ValueError("timeline actions must be sorted by start frame")
        object.__setattr__(self, "actions", tuple(self.actions))


def interval_iou(a_start: int, a_end: int, b_start: int, b_end: int) -> float:
    """Temporal IoU of two inclusive frame intervals."""
    inter = min(a_end, b_end) - max(a_start, b_start) + 1
    if inter <= 0:
        return 0.0
    union = max(a_end, b_end) - min(a_start, b_start) + 1
    return inter / union


def _confident_moves(move_probs: np.ndarray, thresholds: np.ndarray) -> dict[MoveLabel, float]:
    return {
        MoveLabel(i + 1): float(move_probs[i])
        for i in range(len(move_probs))
        if move_probs[i] >= thresholds[i]
    }


def scan(
    features: FeatureSequence,
    model,
    thresholds: np.ndarray,
    w_max: int = W_MAX,
    w_initial: int = W_INITIAL,
    lookahead: int = HALF_STEP_LOOKAHEAD,
) -> list[DetectedAction]:
    """Decode a continuous stream into raw detections.

    ``model`` is anything exposing ``predict_window(x, valid) -> (move_probs,
    blade_probs)``. Starting at frame s with window w, the window grows
    until any class probability reaches its threshold; on confidence the
    action is emitted and s jumps past it, otherwise s slides forward by one
    frame once the window hits the cap. A half-step detection whose
    corresponding full step starts within the lookahead horizon is merged
    into the full step (when the combined span still fits one window).
    Total forward passes are bounded by T * w_max, asserted on exit.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n = len(features)
    if n == 0:
        return []
    raw: list[DetectedAction] = []
    forward_passes = 0
    s = 0
    while s < n:
        emitted = None
        w = w_initial
        while w <= w_max and s + w - 1 < n:
            end = s + w - 1
            window = features.features[s : end + 1]
            valid = features.valid[s : end + 1]
            if not np.any(valid):
                w += 1
                continue
            move_probs, blade_probs = model.predict_window(window, valid)
            forward_passes += 1
            confident = _confident_moves(move_probs, thresholds)
            if confident:
                blade = BladeLine(int(np.argmax(blade_probs)))
                emitted = DetectedAction(
                    features_start_frame(features) + s,
                    features_start_frame(features) + end,
                    confident,
                    blade,
                    float(blade_probs.max()),
                )
                break
            w += 1
        if emitted is not None:
            raw.append(emitted)
            s = (emitted.end_frame - features_start_frame(features)) + 1
        else:
            s += 1
    assert forward_passes <= n * w_max, "window scan exceeded its forward-pass bound"
    return _merge_half_steps(raw, lookahead, w_max)


def features_start_frame(features: FeatureSequence) -> int:
    """Frame index of the first feature row (streams start at 0 by default)."""
    return getattr(features, "start_frame", 0)


def _merge_half_steps(actions: list[DetectedAction], lookahead: int, w_max: int) -> list[DetectedAction]:
    """Fold half-step detections into an immediately following full step."""
    out: list[DetectedAction] = []
    i = 0
    while i < len(actions):
        action = actions[i]
        halves = [m for m in action.moves if m in _HALF_TO_FULL]
        merged = False
        if halves and i + 1 < len(actions):
            nxt = actions[i + 1]
            gap = nxt.start_frame - action.end_frame
            span = nxt.end_frame - action.start_frame + 1
            wanted = {_HALF_TO_FULL[h] for h in halves}
            if 0 < gap <= lookahead and span <= w_max and wanted & set(nxt.moves):
                out.append(
                    DetectedAction(
                        action.start_frame, nxt.end_frame, nxt.moves, nxt.blade, nxt.blade_confidence
                    )
                )
                i += 2
                merged = True
        if not merged:
            out.append(action)
            i += 1
    return out


def merge_nms(
    actions: list[DetectedAction],
    clip_id: str,
    side: Side,
    overlap_threshold: float = NMS_OVERLAP_THRESHOLD,
) -> ActionTimeline:
    """Non-maximum suppression over overlapping detections.

    Actions are visited by descending confidence (ties: earlier start, then
    lexicographic label sets, so input order never matters); an action is
    suppressed when its temporal IoU with an already-kept action sharing at
    least one move label exceeds the threshold. Survivors come back sorted
    by start frame.
    """
    def order_key(a: DetectedAction):
        labels = tuple(sorted(int(m) for m in a.moves))
        return (-a.max_confidence, a.start_frame, labels, a.end_frame)

    kept: list[DetectedAction] = []
    for action in sorted(actions, key=order_key):
        suppressed = False
        for winner in kept:
            if not (action.label_set() & winner.label_set()):
                continue
            overlap = interval_iou(
                action.start_frame, action.end_frame, winner.start_frame, winner.end_frame
            )
            if overlap > overlap_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(action)
    kept.sort(key=lambda a: (a.start_frame, a.end_frame))
    return ActionTimeline(clip_id, side, tuple(kept))


def decode_trimmed(features: FeatureSequence, model, thresholds: np.ndarray) -> DetectedAction:
    """Single forward pass over a trimmed segment.

    Moves are every class whose probability clears its threshold (possibly
    none, reported as an empty move set); blade is the argmax. Segments
    longer than the window cap are still classified whole, but the reported
    interval is capped at the maximum action length.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(features) == 0:
        raise ValueError("cannot decode an empty segment")
    if not np.any(features.valid):
        raise ValueError("segment has no valid frames")
    move_probs, blade_probs = model.predict_window(features.features, features.valid)
    moves = _confident_moves(move_probs, thresholds)
    blade = BladeLine(int(np.argmax(blade_probs)))
    start = features_start_frame(features)
    end = start + min(len(features), W_MAX) - 1
    return DetectedAction(start, end, moves, blade, float(blade_probs.max()))


def parse_timeline_csv(path) -> list[ActionTimeline]:
    """Read timelines back from the CSV export, grouped by (clip, side)."""
    import pathlib

    grouped: dict[tuple[str, Side], list[DetectedAction]] = {}
    order: list[tuple[str, Side]] = []
    with pathlib.Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if not row or row[0] == "clip_id":
                continue
            clip_id, side_raw, start, end, moves_raw, blade_raw, conf = row
            moves = {}
            if moves_raw != "none":
                for token in moves_raw.split("+"):
                    moves[MoveLabel.from_token(token)] = float(conf)
            action = DetectedAction(
                int(start), int(end), moves, BladeLine.from_token(blade_raw), float(conf)
            )
            key = (clip_id, Side(side_raw))
            if key not in grouped:
                grouped[key] = []
                order.append(key)
            grouped[key].append(action)
    return [
        ActionTimeline(clip_id, side, tuple(sorted(grouped[(clip_id, side)], key=lambda a: a.start_frame)))
        for clip_id, side in order
    ]


def timeline_to_csv(timeline: ActionTimeline) -> str:
    """Export using the annotation vocabulary so timelines diff against truth."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["clip_id", "side", "start", "end", "moves", "blade", "confidence"])
    for action in timeline.actions:
        moves = "+".join(m.token for m in sorted(action.moves))
        writer.writerow(
            [
                timeline.clip_id,
                timeline.side.value,
                action.start_frame,
                action.end_frame,
                moves if moves else "none",
                action.blade.token,
                f"{action.max_confidence:.6f}",
            ]
        )
    return buf.getvalue()
