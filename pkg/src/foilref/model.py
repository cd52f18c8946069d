"""Encoder-only transformer for multi-label move and blade recognition.

Pure numpy, float64, with hand-written reverse-mode gradients: the forward
pass caches activations, ``backward`` replays them exactly, and the AdamW
step applies decoupled weight decay under a warmup/flat/cosine schedule.
The 17 output logits split into 12 independent sigmoids (moves) and a
5-way softmax (blade line).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

from .core import NUM_BLADES, NUM_MOVES
from .features import FEATURE_DIM


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = FEATURE_DIM
    embed_dim: int = 128
    layers: int = 3
    heads: int = 8
    ff_dim: int = 512
    dropout: float = 0.1
    num_moves: int = NUM_MOVES
    num_blades: int = NUM_BLADES
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def num_outputs(self) -> int:
        return self.num_moves + self.num_blades


def _tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.embed_dim, config.input_dim
    shapes: dict[str, tuple[int, ...]] = {
        "input.weight": (f, d),
        "input.bias": (d,),
    }
    for l in range(config.layers):
        for name in ("q", "k", "v", "o"):
            shapes[f"enc{l}.attn.{name}.weight"] = (d, d)
            shapes[f"enc{l}.attn.{name}.bias"] = (d,)
        shapes[f"enc{l}.norm1.gain"] = (d,)
        shapes[f"enc{l}.norm1.bias"] = (d,)
        shapes[f"enc{l}.ff1.weight"] = (d, config.ff_dim)
        shapes[f"enc{l}.ff1.bias"] = (config.ff_dim,)
        shapes[f"enc{l}.ff2.weight"] = (config.ff_dim, d)
        shapes[f"enc{l}.ff2.bias"] = (d,)
        shapes[f"enc{l}.norm2.gain"] = (d,)
        shapes[f"enc{l}.norm2.bias"] = (d,)
    shapes["head.weight"] = (d, config.num_outputs)
    shapes["head.bias"] = (config.num_outputs,)
    return shapes


@dataclass
class ModelWeights:
    """All parameter tensors, keyed by a stable dotted name."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ValueError(f"weight names mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            arr = np.asarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            self.tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(_tensor_shapes(self.config))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: np.array(v) for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_weights(config: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    """Xavier-uniform projections, zero biases, unit/zero layer norms."""
    tensors = {}
    for name, shape in _tensor_shapes(config).items():
        if name.endswith(".weight"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-limit, limit, shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelWeights(config, tensors)


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Classic sinusoidal positional encoding table of shape (length, dim)."""
    if dim % 2 != 0:
        raise ValueError("positional encoding dimension must be even")
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs)
    return table


@dataclass(frozen=True)
class Prediction:
    """Independent move probabilities plus a blade-line simplex."""

    move_probs: np.ndarray  # (12,) in [0, 1]
    blade_probs: np.ndarray  # (5,) summing to 1

    def __post_init__(self):
        mp = np.asarray(self.move_probs, dtype=np.float64)
        bp = np.asarray(self.blade_probs, dtype=np.float64)
        if np.any(mp < 0.0) or np.any(mp > 1.0):
            raise ValueError("move probabilities must lie in [0, 1]")
        if abs(bp.sum() - 1.0) > 1e-6 or np.any(bp < 0.0):
            raise ValueError("blade probabilities must form a simplex")
        object.__setattr__(self, "move_probs", mp)
        object.__setattr__(self, "blade_probs", bp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=axis, keepdims=True)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def _layernorm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layernorm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, inv_std = cache
    dxhat = dy * gain
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(shape) >= p).astype(np.float64) / (1.0 - p)


def forward(
    weights: ModelWeights,
    x: np.ndarray,
    mask: np.ndarray | None = None,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    return_cache: bool = False,
):
    """Run the encoder over a batch of (possibly padded) sequences.

    ``x`` is (B, T, input_dim) or a single (T, input_dim) sequence; ``mask``
    marks valid frames (None means everything is valid). Padded keys are
    excluded from attention and pooling, so output is invariant to padding.
    Dropout fires only in train mode and draws from ``rng``.

    Returns (move_probs, blade_probs, move_logits, blade_logits[, cache]).
    """
    cfg = weights.config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    b, t, f = x.shape
    if f != cfg.input_dim:
        raise ValueError(f"expected input dim {cfg.input_dim}, got {f}")
    if mask is None:
        mask = np.ones((b, t), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if single and mask.ndim == 1:
            mask = mask[None]
    if mask.shape != (b, t):
        raise ValueError(f"mask shape {mask.shape} does not match input {(b, t)}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("empty sequence: at least one frame must be valid")
    use_dropout = train_mode and cfg.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("train-mode dropout requires an rng")

    w = weights.tensors
    cache: dict = {"x": x, "mask": mask, "counts": counts, "layers": []}

    h = x @ w["input.weight"] + w["input.bias"]
    h = h + sinusoidal_pe(t, cfg.embed_dim)[None]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    key_mask = ~mask[:, None, None, :]  # (B, 1, 1, T) broadcast over heads/queries

    for l in range(cfg.layers):
        lc: dict = {"h_in": h}
        q = _split_heads(h @ w[f"enc{l}.attn.q.weight"] + w[f"enc{l}.attn.q.bias"], cfg.heads)
        k = _split_heads(h @ w[f"enc{l}.attn.k.weight"] + w[f"enc{l}.attn.k.bias"], cfg.heads)
        v = _split_heads(h @ w[f"enc{l}.attn.v.weight"] + w[f"enc{l}.attn.v.bias"], cfg.heads)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(key_mask, -np.inf, scores)
        probs = _softmax(scores, axis=-1)
        context = _merge_heads(probs @ v)
        attn = context @ w[f"enc{l}.attn.o.weight"] + w[f"enc{l}.attn.o.bias"]
        if use_dropout:
            lc["attn_drop"] = _dropout_mask(attn.shape, cfg.dropout, rng)
            attn = attn * lc["attn_drop"]
        r1 = h + attn
        n1, ln1_cache = _layernorm_forward(r1, w[f"enc{l}.norm1.gain"], w[f"enc{l}.norm1.bias"], cfg.layer_norm_eps)
        u = n1 @ w[f"enc{l}.ff1.weight"] + w[f"enc{l}.ff1.bias"]
        g = _gelu(u)
        if use_dropout:
            lc["ff_drop"] = _dropout_mask(g.shape, cfg.dropout, rng)
            g = g * lc["ff_drop"]
        f2 = g @ w[f"enc{l}.ff2.weight"] + w[f"enc{l}.ff2.bias"]
        r2 = n1 + f2
        h, ln2_cache = _layernorm_forward(r2, w[f"enc{l}.norm2.gain"], w[f"enc{l}.norm2.bias"], cfg.layer_norm_eps)
        lc.update(q=q, k=k, v=v, probs=probs, context=context, ln1=ln1_cache, ln2=ln2_cache, u=u, g=g, n1=n1)
        cache["layers"].append(lc)

    pooled = (h * mask[:, :, None]).sum(axis=1) / counts[:, None]
    logits = pooled @ w["head.weight"] + w["head.bias"]
    cache["h_final"] = h
    cache["pooled"] = pooled

    move_logits = logits[:, : cfg.num_moves]
    blade_logits = logits[:, cfg.num_moves :]
    move_probs = _sigmoid(move_logits)
    blade_probs = _softmax(blade_logits, axis=-1)

    if single:
        move_probs, blade_probs = move_probs[0], blade_probs[0]
        move_logits, blade_logits = move_logits[0], blade_logits[0]
    if return_cache:
        return move_probs, blade_probs, move_logits, blade_logits, cache
    return move_probs, blade_probs, move_logits, blade_logits


def predict_single(weights: ModelWeights, x: np.ndarray, mask: np.ndarray | None = None) -> Prediction:
    move_probs, blade_probs, _, _ = forward(weights, x, mask, train_mode=False)
    return Prediction(move_probs, blade_probs)


def backward(weights: ModelWeights, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the forward pass.

    ``dlogits`` is (B, 17): the loss gradient at the classifier output.
    Returns a gradient tensor for every weight tensor.
    """
    cfg = weights.config
    w = weights.tensors
    grads = weights.zeros_like()
    mask = cache["mask"]
    counts = cache["counts"]
    pooled = cache["pooled"]
    if dlogits.shape != (pooled.shape[0], cfg.num_outputs):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match cached batch")

    grads["head.weight"] = pooled.T @ dlogits
    grads["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ w["head.weight"].T
    dh = (mask[:, :, None] * dpooled[:, None, :]) / counts[:, None, None]

    scale = 1.0 / np.sqrt(cfg.head_dim)
    for l in reversed(range(cfg.layers)):
        lc = cache["layers"][l]
        dr2, dg2, db2 = _layernorm_backward(dh, w[f"enc{l}.norm2.gain"], lc["ln2"])
        grads[f"enc{l}.norm2.gain"] = dg2
        grads[f"enc{l}.norm2.bias"] = db2

        dn1 = np.array(dr2)
        df2 = dr2
        grads[f"enc{l}.ff2.weight"] = np.einsum("btf,btd->fd", lc["g"], df2)
        grads[f"enc{l}.ff2.bias"] = df2.sum(axis=(0, 1))
        dg = df2 @ w[f"enc{l}.ff2.weight"].T
        if "ff_drop" in lc:
            dg = dg * lc["ff_drop"]
        du = dg * _gelu_grad(lc["u"])
        grads[f"enc{l}.ff1.weight"] = np.einsum("btd,btf->df", lc["n1"], du)
        grads[f"enc{l}.ff1.bias"] = du.sum(axis=(0, 1))
        dn1 += du @ w[f"enc{l}.ff1.weight"].T

        dr1, dg1, db1 = _layernorm_backward(dn1, w[f"enc{l}.norm1.gain"], lc["ln1"])
        grads[f"enc{l}.norm1.gain"] = dg1
        grads[f"enc{l}.norm1.bias"] = db1

        dattn = np.array(dr1)
        if "attn_drop" in lc:
            dattn = dattn * lc["attn_drop"]
        grads[f"enc{l}.attn.o.weight"] = np.einsum("btd,bte->de", lc["context"], dattn)
        grads[f"enc{l}.attn.o.bias"] = dattn.sum(axis=(0, 1))
        dcontext = _split_heads(dattn @ w[f"enc{l}.attn.o.weight"].T, cfg.heads)

        probs, v = lc["probs"], lc["v"]
        dprobs = dcontext @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dcontext
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dq = (dscores @ lc["k"]) * scale
        dk = (dscores.transpose(0, 1, 3, 2) @ lc["q"]) * scale

        h_in = lc["h_in"]
        dh = dr1
        for name, dhead in (("q", dq), ("k", dk), ("v", dv)):
            flat = _merge_heads(dhead)
            grads[f"enc{l}.attn.{name}.weight"] = np.einsum("btd,bte->de", h_in, flat)
            grads[f"enc{l}.attn.{name}.bias"] = flat.sum(axis=(0, 1))
            dh = dh + flat @ w[f"enc{l}.attn.{name}.weight"].T

    grads["input.weight"] = np.einsum("btf,btd->fd", cache["x"], dh)
    grads["input.bias"] = dh.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def move_loss(logits: np.ndarray, targets: np.ndarray, class_weights: np.ndarray) -> float:
    """Weighted multi-label binary cross-entropy from logits.

    Averaged over the 12 labels and then over the batch; stabilized via the
    softplus identity so saturated logits cannot overflow.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    w = np.asarray(class_weights, dtype=np.float64)
    per_label = w * (_softplus(z) - y * z)
    return float(per_label.sum(axis=1).mean() / z.shape[1])


def move_loss_grad(logits, targets, class_weights) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    w = np.asarray(class_weights, dtype=np.float64)
    return w * (_sigmoid(z) - y) / (z.shape[1] * z.shape[0])


def blade_loss(logits: np.ndarray, target_class) -> float:
    """Softmax cross-entropy at the true blade class, batch-averaged."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    c = np.atleast_1d(np.asarray(target_class, dtype=int))
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return float((lse - z[np.arange(z.shape[0]), c]).mean())


def blade_loss_grad(logits, target_class) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    c = np.atleast_1d(np.asarray(target_class, dtype=int))
    g = _softmax(z, axis=-1)
    g[np.arange(z.shape[0]), c] -= 1.0
    return g / z.shape[0]


def combined_loss(l_move: float, l_blade: float, blade_weight: float = 0.677) -> float:
    return l_move + blade_weight * l_blade


def loss_and_logit_grads(
    move_logits: np.ndarray,
    blade_logits: np.ndarray,
    move_targets: np.ndarray,
    blade_targets: np.ndarray,
    class_weights: np.ndarray,
    blade_weight: float = 0.677,
) -> tuple[float, np.ndarray]:
    """Combined loss plus its gradient stacked as (B, 17) for ``backward``."""
    lm = move_loss(move_logits, move_targets, class_weights)
    lb = blade_loss(blade_logits, blade_targets)
    dmove = move_loss_grad(move_logits, move_targets, class_weights)
    dblade = blade_weight * blade_loss_grad(blade_logits, blade_targets)
    return combined_loss(lm, lb, blade_weight), np.concatenate([dmove, dblade], axis=1)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class NonFiniteGradientError(RuntimeError):
    def __init__(self, tensor_name: str):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite gradient in tensor {tensor_name!r}; step aborted")


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    total = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    weights: ModelWeights,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update with decoupled weight decay, in place.

    Gradients must already be clipped; non-finite values abort the step and
    name the offending tensor.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name in weights.names():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p = weights.tensors[name]
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)


def learning_rate(
    epoch: float,
    base_lr: float = 1e-3,
    warmup_epochs: int = 3,
    flat_epochs: int = 5,
    total_epochs: int = 60,
) -> float:
    """Warmup/flat/cosine schedule evaluated at a (fractional) epoch.

    Ramps linearly from 0 to base over the warmup, holds flat, then cosine
    anneals to 0 at ``total_epochs``.
    """
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    flat_end = warmup_epochs + flat_epochs
    if epoch < flat_end:
        return base_lr
    if epoch >= total_epochs:
        return 0.0
    progress = (epoch - flat_end) / (total_epochs - flat_end)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Weights archive: named f32 tensors plus a JSON manifest
# ---------------------------------------------------------------------------

_ARCHIVE_MAGIC = b"FWA1"
_DTYPE_F32_LE = 0


def save_weights(
    path,
    weights: ModelWeights,
    provenance: dict | None = None,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a self-describing tensor archive.

    Layout: magic, JSON manifest (model config + training provenance), a
    tensor table of (name, shape, dtype code, byte offset), then raw
    little-endian float32 data. ``extra_tensors`` lets calibration vectors
    (thresholds, temperatures) travel with the model.
    """
    entries: list[tuple[str, np.ndarray]] = [(n, weights.tensors[n]) for n in weights.names()]
    for name in sorted(extra_tensors or {}):
        entries.append((name, np.asarray(extra_tensors[name], dtype=np.float64)))
    manifest = {
        "model": asdict(weights.config),
        "provenance": provenance or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_ARCHIVE_MAGIC)
    buf.write(struct.pack("<I", len(manifest_bytes)))
    buf.write(manifest_bytes)
    buf.write(struct.pack("<I", len(entries)))
    offset = 0
    blobs = []
    for name, arr in entries:
        data = arr.astype("<f4").tobytes()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", _DTYPE_F32_LE))
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(struct.pack("<Q", offset))
        offset += len(data)
        blobs.append(data)
    for data in blobs:
        buf.write(data)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path) -> tuple[ModelWeights, dict, dict[str, np.ndarray]]:
    """Read an archive back as (weights, provenance, extra tensors)."""
    data = Path(path).read_bytes()
    if data[:4] != _ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a weights archive (bad magic)")
    off = 4
    (manifest_len,) = struct.unpack_from("<I", data, off)
    off += 4
    manifest = json.loads(data[off : off + manifest_len].decode("utf-8"))
    off += manifest_len
    (n_tensors,) = struct.unpack_from("<I", data, off)
    off += 4
    table = []
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        dtype_code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype_code != _DTYPE_F32_LE:
            raise ValueError(f"{path}: unsupported dtype code {dtype_code} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (tensor_off,) = struct.unpack_from("<Q", data, off)
        off += 8
        table.append((name, shape, tensor_off))
    data_start = off
    tensors: dict[str, np.ndarray] = {}
    for name, shape, tensor_off in table:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=data_start + tensor_off)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    config = ModelConfig(**manifest["model"])
    expected = set(_tensor_shapes(config))
    model_tensors = {k: v for k, v in tensors.items() if k in expected}
    extra = {k: v for k, v in tensors.items() if k not in expected}
    return ModelWeights(config, model_tensors), manifest.get("provenance", {}), extra
