"""Training data assembly, augmentation, rebalancing, and the fit loop.

Training examples keep their normalized joint sequences (with a small
temporal context margin) rather than precomputed features, so geometric
augmentation can transform the joints and re-derive every feature block,
and temporal jitter can re-slice the segment window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .core import NUM_BLADES, NUM_MOVES, AnnotatedSequence, BladeLine, MoveLabel, PoseTrack, Side
from .features import FEATURE_DIM, FeatureSequence, assemble_from_normalized, normalize_track
from .model import (
    AdamState,
    ModelConfig,
    ModelWeights,
    NonFiniteGradientError,
    adamw_step,
    backward,
    clip_gradients,
    forward,
    init_weights,
    learning_rate,
    loss_and_logit_grads,
)
from .validation import check_sequences, check_seed_rng

logger = logging.getLogger(__name__)

# Context margin around each segment: jitter can shift boundaries by +/-2
# and accelerations need two prior frames, so 4 frames on each side suffice.
CONTEXT_MARGIN = 4


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 0.5
    batch_size: int = 24
    warmup_epochs: int = 3
    flat_epochs: int = 5
    total_epochs: int = 60
    epochs: int = 60  # how long to actually train; schedule spans total_epochs
    blade_loss_weight: float = 0.677
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "weight_decay", "clip_norm", "batch_size", "blade_loss_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class AugmentConfig:
    mode: str = "all"  # all | none | noise | temporal | feature
    jitter_range: int = 2  # temporal jitter drawn from {-2, ..., 2}
    noise_sigma: float = 0.05
    rotation_max: float = 0.05  # radians, uniform in +/- this
    scale_low: float = 0.95
    scale_high: float = 1.05

    def __post_init__(self):
        if self.mode not in ("all", "none", "noise", "temporal", "feature"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


@dataclass
class RebalanceConfig:
    enabled: bool = True
    oversample_target: int = 400
    downsample_blade_six: bool = True
    blade_six_ratio: float = 2.0 / 3.0


@dataclass(frozen=True)
class AugmentParams:
    """Concrete draw of the four augmentation transforms."""

    jitter: int = 0
    noise: np.ndarray | None = None  # matches the joint array shape
    rotation: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class TrainingExample:
    """One labeled segment plus the joint context needed to augment it."""

    clip_id: str
    side: Side
    joints: np.ndarray  # (T_ctx, 12, 2) normalized, pelvis-centered
    joint_valid: np.ndarray  # (T_ctx, 12) bool
    frame_valid: np.ndarray  # (T_ctx,) bool
    seg_start: int  # inclusive, relative to the context window
    seg_end: int  # inclusive
    move_targets: np.ndarray  # (12,) float 0/1
    blade_target: int

    def __post_init__(self):
        if not (0 <= self.seg_start <= self.seg_end < self.joints.shape[0]):
            raise ValueError("segment bounds must lie inside the context window")
        if self.move_targets.shape != (NUM_MOVES,):
            raise ValueError("move targets must have 12 entries")
        if float(self.move_targets.sum()) <= 0.0:
            raise ValueError("an example must carry at least one move label")
        if not 0 <= self.blade_target < NUM_BLADES:
            raise ValueError(f"invalid blade target {self.blade_target}")

    @property
    def moves(self) -> frozenset[MoveLabel]:
        return frozenset(MoveLabel(i + 1) for i in np.flatnonzero(self.move_targets))


def build_examples(track: PoseTrack, annotations: AnnotatedSequence) -> list[TrainingExample]:
    """Slice one canonical-view track into per-segment training examples."""
    if track.clip_id != annotations.clip_id or track.side is not Side(annotations.side):
        raise ValueError("track and annotations must describe the same fencer")
    coords, joint_valid, frame_valid = normalize_track(track)
    n = coords.shape[0]
    examples = []
    for seg in annotations.segments:
        start = seg.start_frame - track.start_frame
        end = seg.end_frame - track.start_frame
        if start < 0 or end >= n:
            raise ValueError(
                f"segment [{seg.start_frame}, {seg.end_frame}] falls outside track frames"
            )
        ctx_start = max(0, start - CONTEXT_MARGIN)
        ctx_end = min(n - 1, end + CONTEXT_MARGIN)
        targets = np.zeros(NUM_MOVES)
        for move in seg.moves:
            targets[move.index] = 1.0
        examples.append(
            TrainingExample(
                clip_id=track.clip_id,
                side=track.side,
                joints=coords[ctx_start : ctx_end + 1],
                joint_valid=joint_valid[ctx_start : ctx_end + 1],
                frame_valid=frame_valid[ctx_start : ctx_end + 1],
                seg_start=start - ctx_start,
                seg_end=end - ctx_start,
                move_targets=targets,
                blade_target=int(seg.blade),
            )
        )
    return examples


def example_features(example: TrainingExample) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the 101-D features for the example's segment rows."""
    feats, valid = assemble_from_normalized(
        example.joints, example.joint_valid, example.frame_valid
    )
    sl = slice(example.seg_start, example.seg_end + 1)
    return feats[sl], valid[sl]


def sample_augment_params(rng: np.random.Generator, config: AugmentConfig, joint_shape) -> AugmentParams:
    mode = config.mode
    if mode == "none":
        return AugmentParams()
    jitter = 0
    noise = None
    rotation = 0.0
    scale = 1.0
    if mode in ("all", "temporal"):
        jitter = int(rng.integers(-config.jitter_range, config.jitter_range + 1))
    if mode in ("all", "noise"):
        noise = rng.normal(0.0, config.noise_sigma, joint_shape)
    if mode in ("all", "feature"):
        rotation = float(rng.uniform(-config.rotation_max, config.rotation_max))
        scale = float(rng.uniform(config.scale_low, config.scale_high))
    return AugmentParams(jitter, noise, rotation, scale)


def augment(
    example: TrainingExample,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    params: AugmentParams | None = None,
) -> TrainingExample:
    """Apply temporal jitter plus geometric noise to one example.

    Segment boundaries shift by the jitter (clamped inside the context
    window); Gaussian noise, rotation about the pelvis, and uniform scaling
    transform the normalized joints, after which features are re-derived.
    Identity parameters return an equal example.
    """
    config = config or AugmentConfig()
    if params is None:
        params = sample_augment_params(rng, config, example.joints.shape)

    n = example.joints.shape[0]
    length = example.seg_end - example.seg_start
    start = int(np.clip(example.seg_start + params.jitter, 0, n - 1 - length))

    joints = np.array(example.joints)
    if params.noise is not None:
        joints = joints + params.noise
    if params.rotation != 0.0:
        c, s = np.cos(params.rotation), np.sin(params.rotation)
        rot = np.array([[c, -s], [s, c]])
        joints = joints @ rot.T
    if params.scale != 1.0:
        joints = joints * params.scale
    return replace(example, joints=joints, seg_start=start, seg_end=start + length)


def move_counts(examples: list[TrainingExample]) -> np.ndarray:
    counts = np.zeros(NUM_MOVES, dtype=int)
    for ex in examples:
        counts += (ex.move_targets > 0).astype(int)
    return counts


def class_weights(counts: np.ndarray) -> np.ndarray:
    """Inverse-frequency move weights, normalized to mean 1.

    Classes with zero observations inherit the weight of the rarest seen
    class so an absent label cannot blow up the loss.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if np.all(counts <= 0):
        return np.ones(len(counts))
    weights = np.empty_like(counts)
    seen = counts > 0
    weights[seen] = 1.0 / counts[seen]
    weights[~seen] = weights[seen].max()
    return weights * (len(weights) / weights.sum())


def rebalance(
    examples: list[TrainingExample],
    rng: np.random.Generator,
    config: RebalanceConfig | None = None,
    augment_config: AugmentConfig | None = None,
) -> list[TrainingExample]:
    """Downsample the dominant blade-6 class, then oversample rare moves.

    Blade-6 examples are dropped at random until their count is at most
    the configured ratio of the mean of the other four blade classes.
    Move classes under the oversample target are then topped up with
    freshly augmented copies of random members. Downsampling runs first so
    oversampled move counts are not cut back afterwards.
    """
    config = config or RebalanceConfig()
    if not config.enabled:
        return list(examples)
    out = list(examples)

    if config.downsample_blade_six:
        six = [i for i, ex in enumerate(out) if ex.blade_target == int(BladeLine.SIX)]
        other_counts = np.bincount(
            [ex.blade_target for ex in out if ex.blade_target != int(BladeLine.SIX)],
            minlength=NUM_BLADES,
        )
        others = np.delete(other_counts, int(BladeLine.SIX))
        target = int(np.floor(config.blade_six_ratio * others.mean()))
        if len(six) > target:
            drop = rng.choice(len(six), size=len(six) - target, replace=False)
            drop_set = {six[i] for i in drop}
            out = [ex for i, ex in enumerate(out) if i not in drop_set]

    counts = move_counts(out)
    for move in sorted(MoveLabel, key=lambda m: counts[m.index]):
        pool = [ex for ex in out if ex.move_targets[move.index] > 0]
        if not pool:
            if counts[move.index] < config.oversample_target:
                logger.warning("move class %s has no examples; skipping oversampling", move.token)
            continue
        while counts[move.index] < config.oversample_target:
            source = pool[int(rng.integers(len(pool)))]
            copy = augment(source, rng, augment_config)
            out.append(copy)
            counts += (copy.move_targets > 0).astype(int)
    return out


def _pad_batch(feature_list: list[np.ndarray], valid_list: list[np.ndarray]):
    max_t = max(f.shape[0] for f in feature_list)
    b = len(feature_list)
    x = np.zeros((b, max_t, FEATURE_DIM))
    mask = np.zeros((b, max_t), dtype=bool)
    for i, (f, v) in enumerate(zip(feature_list, valid_list)):
        x[i, : f.shape[0]] = f
        mask[i, : f.shape[0]] = v
    return x, mask


@dataclass
class TrainResult:
    weights: ModelWeights
    loss_history: list[float]
    class_weights: np.ndarray


def fit_model(
    examples: list[TrainingExample],
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    augment_config: AugmentConfig | None = None,
    rebalance_config: RebalanceConfig | None = None,
    feature_mask: np.ndarray | None = None,
) -> TrainResult:
    """Train the classifier on segment examples.

    Move class weights come from the raw (pre-rebalancing) frequencies;
    rebalancing and per-draw augmentation then shape each epoch's batches.
    All randomness flows from the train seed, so identical inputs yield
    bit-identical weights. ``feature_mask`` optionally restricts input
    features to a column subset (used by the raw-joints ablation).
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    augment_config = augment_config or AugmentConfig()
    rebalance_config = rebalance_config or RebalanceConfig()
    if not examples:
        raise ValueError("no training examples")

    rng = np.random.default_rng(train_config.seed)
    weights_vec = class_weights(move_counts(examples))
    pool = rebalance(examples, rng, rebalance_config, augment_config)

    weights = init_weights(model_config, rng)
    state = AdamState()
    steps_per_epoch = max(1, int(np.ceil(len(pool) / train_config.batch_size)))
    history = []
    step = 0
    for _epoch in range(train_config.epochs):
        order = rng.permutation(len(pool))
        epoch_loss = 0.0
        for start in range(0, len(pool), train_config.batch_size):
            batch_idx = order[start : start + train_config.batch_size]
            feats, valids, y_moves, y_blades = [], [], [], []
            for i in batch_idx:
                ex = pool[i]
                if augment_config.mode != "none":
                    ex = augment(ex, rng, augment_config)
                f, v = example_features(ex)
                if not np.any(v):
                    v = np.ones(f.shape[0], dtype=bool)  # degenerate slice: keep zeros visible
                if feature_mask is not None:
                    f = _apply_feature_mask(f, feature_mask)
                feats.append(f)
                valids.append(v)
                y_moves.append(ex.move_targets)
                y_blades.append(ex.blade_target)
            x, mask = _pad_batch(feats, valids)
            lr = learning_rate(
                step / steps_per_epoch,
                train_config.lr,
                train_config.warmup_epochs,
                train_config.flat_epochs,
                train_config.total_epochs,
            )
            _, _, move_logits, blade_logits, cache = forward(
                weights, x, mask, train_mode=True, rng=rng, return_cache=True
            )
            loss, dlogits = loss_and_logit_grads(
                move_logits,
                blade_logits,
                np.array(y_moves),
                np.array(y_blades),
                weights_vec,
                train_config.blade_loss_weight,
            )
            grads = backward(weights, cache, dlogits)
            clip_gradients(grads, train_config.clip_norm)
            adamw_step(
                weights, grads, state, lr,
                weight_decay=train_config.weight_decay, betas=train_config.betas,
            )
            epoch_loss += loss * len(batch_idx)
            step += 1
        history.append(epoch_loss / len(pool))
    return TrainResult(weights, history, weights_vec)


def _apply_feature_mask(features: np.ndarray, feature_mask: np.ndarray) -> np.ndarray:
    """Zero everything outside the mask; input width stays FEATURE_DIM."""
    out = np.zeros_like(features)
    out[:, feature_mask] = features[:, feature_mask]
    return out


def fit_feature_arrays(
    sequences: list[np.ndarray],
    y: np.ndarray,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    valid_list: list[np.ndarray] | None = None,
    feature_mask: np.ndarray | None = None,
) -> TrainResult:
    """Train directly on precomputed feature slices (no joint augmentation).

    ``y`` stacks the twelve binary move columns and the blade class index
    as (N, 13). Used when only derived features are available.
    """
    model_config = model_config or ModelConfig()
    cfg = train_config or TrainConfig()
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (len(sequences), NUM_MOVES + 1):
        raise ValueError(f"y must have shape (N, {NUM_MOVES + 1}); got {y.shape}")
    if valid_list is None:
        valid_list = [np.ones(s.shape[0], dtype=bool) for s in sequences]
    rng = np.random.default_rng(cfg.seed)
    counts = (y[:, :NUM_MOVES] > 0).sum(axis=0)
    weights_vec = class_weights(counts)
    weights = init_weights(model_config, rng)
    state = AdamState()
    steps_per_epoch = max(1, int(np.ceil(len(sequences) / cfg.batch_size)))
    history = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(sequences))
        epoch_loss = 0.0
        for start in range(0, len(sequences), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            feats = [sequences[i] for i in idx]
            if feature_mask is not None:
                feats = [_apply_feature_mask(f, feature_mask) for f in feats]
            valids = []
            for i in idx:
                v = valid_list[i]
                valids.append(v if np.any(v) else np.ones(sequences[i].shape[0], dtype=bool))
            x, mask = _pad_batch(feats, valids)
            lr = learning_rate(
                step / steps_per_epoch, cfg.lr, cfg.warmup_epochs, cfg.flat_epochs, cfg.total_epochs
            )
            _, _, move_logits, blade_logits, cache = forward(
                weights, x, mask, train_mode=True, rng=rng, return_cache=True
            )
            loss, dlogits = loss_and_logit_grads(
                move_logits, blade_logits,
                y[idx, :NUM_MOVES], y[idx, NUM_MOVES].astype(int),
                weights_vec, cfg.blade_loss_weight,
            )
            grads = backward(weights, cache, dlogits)
            clip_gradients(grads, cfg.clip_norm)
            adamw_step(weights, grads, state, lr, cfg.weight_decay, cfg.betas)
            epoch_loss += loss * len(idx)
            step += 1
        history.append(epoch_loss / len(sequences))
    return TrainResult(weights, history, weights_vec)


def evaluate_model(
    weights: ModelWeights,
    feature_list: list[np.ndarray],
    valid_list: list[np.ndarray] | None = None,
    batch_size: int = 64,
    feature_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched eval-mode forward over ragged sequences.

    Returns (move_probs, blade_probs, move_logits, blade_logits), each with
    one row per sequence.
    """
    if valid_list is None:
        valid_list = [np.ones(f.shape[0], dtype=bool) for f in feature_list]
    mp, bp, ml, bl = [], [], [], []
    for start in range(0, len(feature_list), batch_size):
        feats = feature_list[start : start + batch_size]
        if feature_mask is not None:
            feats = [_apply_feature_mask(f, feature_mask) for f in feats]
        x, mask = _pad_batch(feats, valid_list[start : start + batch_size])
        move_probs, blade_probs, move_logits, blade_logits = forward(weights, x, mask)
        mp.append(move_probs)
        bp.append(blade_probs)
        ml.append(move_logits)
        bl.append(blade_logits)
    return tuple(np.concatenate(part, axis=0) for part in (mp, bp, ml, bl))


class MoveBladeClassifier(BaseEstimator):
    """Sklearn-style wrapper around the sequence classifier.

    ``fit`` accepts either a list of :class:`TrainingExample` (enabling
    geometric augmentation) or a list of raw (T, 101) feature arrays with a
    target matrix ``y`` of shape (N, 13): twelve binary move columns plus a
    blade class index. ``predict_proba`` returns (N, 17) with sigmoid move
    probabilities followed by the blade simplex.
    """

    def __init__(
        self,
        embed_dim: int = 128,
        layers: int = 3,
        heads: int = 8,
        ff_dim: int = 512,
        dropout: float = 0.1,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        clip_norm: float = 0.5,
        batch_size: int = 24,
        warmup_epochs: int = 3,
        flat_epochs: int = 5,
        total_epochs: int = 60,
        epochs: int = 60,
        blade_loss_weight: float = 0.677,
        augment_mode: str = "all",
        rebalance: bool = True,
        oversample_target: int = 400,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.layers = layers
        self.heads = heads
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.flat_epochs = flat_epochs
        self.total_epochs = total_epochs
        self.epochs = epochs
        self.blade_loss_weight = blade_loss_weight
        self.augment_mode = augment_mode
        self.rebalance = rebalance
        self.oversample_target = oversample_target
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            layers=self.layers,
            heads=self.heads,
            ff_dim=self.ff_dim,
            dropout=self.dropout,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            flat_epochs=self.flat_epochs,
            total_epochs=self.total_epochs,
            epochs=self.epochs,
            blade_loss_weight=self.blade_loss_weight,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        if X and isinstance(X[0], TrainingExample):
            examples = list(X)
        else:
            sequences = check_sequences(X, FEATURE_DIM)
            y = np.asarray(y)
            if y.shape != (len(sequences), NUM_MOVES + 1):
                raise ValueError(f"y must have shape (N, {NUM_MOVES + 1}); got {y.shape}")
            examples = None
            self._raw_sequences = sequences
        augment_config = AugmentConfig(mode=self.augment_mode)
        rebalance_config = RebalanceConfig(
            enabled=self.rebalance, oversample_target=self.oversample_target
        )
        if examples is not None:
            result = fit_model(
                examples,
                self._model_config(),
                self._train_config(),
                augment_config,
                rebalance_config,
            )
        else:
            result = fit_feature_arrays(sequences, y, self._model_config(), self._train_config())
        self.weights_ = result.weights
        self.loss_history_ = result.loss_history
        self.class_weights_ = result.class_weights
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise RuntimeError("classifier is not fitted")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        sequences = check_sequences(X, FEATURE_DIM)
        mp, bp, _, _ = evaluate_model(self.weights_, sequences)
        return np.concatenate([mp, bp], axis=1)

    def predict_logits(self, X) -> tuple[np.ndarray, np.ndarray]:
        self._check_fitted()
        sequences = check_sequences(X, FEATURE_DIM)
        _, _, ml, bl = evaluate_model(self.weights_, sequences)
        return ml, bl

    def predict(self, X, thresholds: np.ndarray | None = None) -> np.ndarray:
        """Hard labels: (N, 13) = 12 binary move columns + blade argmax."""
        probs = self.predict_proba(X)
        tau = np.full(NUM_MOVES, 0.5) if thresholds is None else np.asarray(thresholds)
        moves = (probs[:, :NUM_MOVES] >= tau).astype(int)
        blades = probs[:, NUM_MOVES:].argmax(axis=1)
        return np.concatenate([moves, blades[:, None]], axis=1)

    def predict_window(self, x: np.ndarray, valid: np.ndarray | None = None):
        """Single-window probabilities for the temporal scanner."""
        self._check_fitted()
        mp, bp, _, _ = forward(self.weights_, np.asarray(x, dtype=np.float64), valid)
        return mp, bp
