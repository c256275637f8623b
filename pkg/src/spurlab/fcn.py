"""1D fully-convolutional classifier with manual-gradient training and CAM.

The network is conv -> batch norm -> ReLU per block (stride 1, same padding,
so sequence length is preserved end to end), then global average pooling and
a linear head.  All gradients are derived by hand and checked against finite
differences in the test suite, so training has no framework dependency and
is bit-deterministic for a fixed seed.

Class activation maps project the final feature maps through the linear
weights of the predicted class, giving a per-timestep relevance vector at
native resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LABELS, AttributionMask, Dataset, TimeSeries
from .metrics import ClassificationMetrics, classification_metrics

CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
INFER_CHUNK = 64  # bounds the im2col buffer during batched inference

DEFAULT_BLOCKS = ((16, 9), (32, 5), (16, 3))


class ModelError(ValueError):
    """Invalid model configuration or shape mismatch."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class FcnConfig:
    conv_blocks: tuple = DEFAULT_BLOCKS
    in_channels: int = 1
    use_batch_norm: bool = True
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.conv_blocks = tuple((int(c), int(k)) for c, k in self.conv_blocks)
        self.validate()

    def validate(self):
        if len(self.conv_blocks) < 1:
            raise ModelError("need at least one conv block")
        for c, k in self.conv_blocks:
            if c < 1:
                raise ModelError(f"conv block with out_channels={c}")
            if k < 1 or k % 2 == 0:
                # even kernels break symmetric same-padding
                raise ModelError(f"kernel_size must be odd and >= 1, got {k}")
        if self.in_channels < 1:
            raise ModelError("in_channels must be >= 1")
        if self.num_classes != 2:
            raise ModelError("only binary classification is supported")

    def to_dict(self) -> dict:
        return {
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "in_channels": self.in_channels,
            "use_batch_norm": self.use_batch_norm,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    lr_decay: float = 0.95
    seed: int = 0
    # std of fresh Gaussian input jitter per batch; 0 disables augmentation
    jitter: float = 0.0

    def validate(self):
        if self.epochs < 1:
            raise ModelError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ModelError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ModelError("learning_rate must be >= 0")
        if not (0 < self.lr_decay <= 1):
            raise ModelError("lr_decay must be in (0, 1]")
        if self.jitter < 0:
            raise ModelError("jitter must be >= 0")


@dataclass
class PredictionResult:
    predicted: str
    confidence: float
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class FcnModel:
    config: FcnConfig
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def last_channels(self) -> int:
        return self.config.conv_blocks[-1][0]

    def copy(self) -> "FcnModel":
        return FcnModel(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            stats={k: v.copy() for k, v in self.stats.items()},
        )


def init_model(cfg: FcnConfig) -> FcnModel:
    """He fan-in initialization, deterministic per cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    stats: dict[str, np.ndarray] = {}
    c_in = cfg.in_channels
    for i, (c_out, k) in enumerate(cfg.conv_blocks):
        fan_in = c_in * k
        params[f"conv{i}/W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k))
        params[f"conv{i}/b"] = np.zeros(c_out)
        if cfg.use_batch_norm:
            params[f"bn{i}/gamma"] = np.ones(c_out)
            params[f"bn{i}/beta"] = np.zeros(c_out)
            stats[f"bn{i}/running_mean"] = np.zeros(c_out)
            stats[f"bn{i}/running_var"] = np.ones(c_out)
        c_in = c_out
    params["linear/W"] = rng.normal(0.0, np.sqrt(2.0 / c_in), (cfg.num_classes, c_in))
    params["linear/b"] = np.zeros(cfg.num_classes)
    return FcnModel(config=cfg, params=params, stats=stats)


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    # x (B, C, n), W (O, C, k) -> y (B, O, n); same padding, stride 1
    k = W.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, C, n, k) view
    y = np.tensordot(win, W, axes=([1, 3], [1, 2]))  # (B, n, O)
    y = np.ascontiguousarray(y.transpose(0, 2, 1)) + b[None, :, None]
    return y, win


def _conv_backward(dy: np.ndarray, win: np.ndarray, W: np.ndarray, x_shape):
    dW = np.tensordot(dy, win, axes=([0, 2], [0, 2]))  # (O, C, k)
    db = dy.sum(axis=(0, 2))
    dwin = np.tensordot(dy, W, axes=([1], [0]))  # (B, n, C, k)
    B, C, n = x_shape
    k = W.shape[2]
    pad = (k - 1) // 2
    dxp = np.zeros((B, C, n + 2 * pad))
    for j in range(k):
        dxp[:, :, j:j + n] += dwin[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + n], dW, db


def _bn_forward_train(x, gamma, beta):
    mu = x.mean(axis=(0, 2))
    var = x.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu[None, :, None]) * inv[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, inv), (mu, var)


def _bn_forward_infer(x, gamma, beta, rm, rv):
    inv = 1.0 / np.sqrt(rv + BN_EPS)
    return gamma[None, :, None] * (x - rm[None, :, None]) * inv[None, :, None] + beta[None, :, None]


def _bn_backward(dy, xhat, inv, gamma):
    N = dy.shape[0] * dy.shape[2]
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    s1 = dxhat.sum(axis=(0, 2), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
    dx = (inv[None, :, None] / N) * (N * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(model: FcnModel, X: np.ndarray, training: bool, update_stats: bool = False):
    """Run the network on X (B, d, n); returns feature maps, GAP, logits, caches."""
    cfg = model.config
    p, st = model.params, model.stats
    h = X
    caches = []
    for i in range(len(cfg.conv_blocks)):
        x_in_shape = h.shape
        z, win = _conv_forward(h, p[f"conv{i}/W"], p[f"conv{i}/b"])
        bn_cache = None
        if cfg.use_batch_norm:
            if training:
                z, bn_cache, (mu, var) = _bn_forward_train(z, p[f"bn{i}/gamma"], p[f"bn{i}/beta"])
                if update_stats:
                    st[f"bn{i}/running_mean"] = (
                        BN_MOMENTUM * st[f"bn{i}/running_mean"] + (1 - BN_MOMENTUM) * mu
                    )
                    st[f"bn{i}/running_var"] = (
                        BN_MOMENTUM * st[f"bn{i}/running_var"] + (1 - BN_MOMENTUM) * var
                    )
            else:
                z = _bn_forward_infer(
                    z, p[f"bn{i}/gamma"], p[f"bn{i}/beta"],
                    st[f"bn{i}/running_mean"], st[f"bn{i}/running_var"],
                )
        relu_mask = z > 0
        h = z * relu_mask
        caches.append((x_in_shape, win, bn_cache, relu_mask))
    feats = h  # (B, C_last, n)
    g = feats.mean(axis=2)
    logits = g @ p["linear/W"].T + p["linear/b"]
    return feats, g, logits, caches


def batch_loss(model: FcnModel, X: np.ndarray, y: np.ndarray, training: bool = True) -> float:
    """Mean cross-entropy of a batch; used directly by the finite-difference check."""
    _, _, logits, _ = _forward_batch(model, X, training=training)
    probs = _softmax(logits)
    eps = 1e-300  # guards log(0) only; softmax output is positive in practice
    return float(-np.mean(np.log(probs[np.arange(len(y)), y] + eps)))


def batch_gradients(model: FcnModel, X: np.ndarray, y: np.ndarray, update_stats: bool = False):
    """Loss plus analytic gradients of every trainable parameter on one batch."""
    cfg = model.config
    p = model.params
    B = X.shape[0]
    feats, g, logits, caches = _forward_batch(model, X, training=True, update_stats=update_stats)
    probs = _softmax(logits)
    loss = float(-np.mean(np.log(probs[np.arange(B), y] + 1e-300)))

    grads: dict[str, np.ndarray] = {}
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads["linear/W"] = dlogits.T @ g
    grads["linear/b"] = dlogits.sum(axis=0)
    dg = dlogits @ p["linear/W"]  # (B, C_last)
    dh = np.repeat(dg[:, :, None], feats.shape[2], axis=2) / feats.shape[2]

    for i in reversed(range(len(cfg.conv_blocks))):
        x_in_shape, win, bn_cache, relu_mask = caches[i]
        dz = dh * relu_mask
        if cfg.use_batch_norm:
            xhat, inv = bn_cache
            dz, dgamma, dbeta = _bn_backward(dz, xhat, inv, p[f"bn{i}/gamma"])
            grads[f"bn{i}/gamma"] = dgamma
            grads[f"bn{i}/beta"] = dbeta
        dh, dW, db = _conv_backward(dz, win, p[f"conv{i}/W"], x_in_shape)
        grads[f"conv{i}/W"] = dW
        grads[f"conv{i}/b"] = db
    return loss, grads


# ---------------------------------------------------------------------------
# Training and inference
# ---------------------------------------------------------------------------

def _split_tensors(ds: Dataset, split: str):
    insts = ds.subset(split)
    if not insts:
        raise ModelError(f"split {split!r} is empty")
    X = np.stack([ts.values for ts in insts])
    y = np.array([LABELS.index(ts.label) for ts in insts], dtype=int)
    return insts, X, y


def train(model: FcnModel, ds: Dataset, tc: TrainConfig):
    """Mini-batch SGD with per-epoch multiplicative lr decay.

    Returns a new model and the per-epoch mean loss trace; the input model
    is not mutated.  Deterministic for fixed (model, ds, tc).
    """
    tc.validate()
    _, X, y = _split_tensors(ds, "train")
    if len(set(y.tolist())) < 2:
        raise ModelError("train split must contain both classes")
    if X.shape[1] != model.config.in_channels:
        raise ModelError(
            f"dataset has {X.shape[1]} channels, model expects {model.config.in_channels}"
        )
    out = model.copy()
    rng = np.random.default_rng(tc.seed)
    lr = tc.learning_rate
    trace = []
    B = X.shape[0]
    for epoch in range(tc.epochs):
        perm = rng.permutation(B)
        total = 0.0
        for start in range(0, B, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            xb = X[idx]
            if tc.jitter > 0:
                xb = xb + rng.normal(0.0, tc.jitter, xb.shape)
            loss, grads = batch_gradients(out, xb, y[idx], update_stats=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {start // tc.batch_size}")
            for name, garr in grads.items():
                out.params[name] -= lr * garr
            total += loss * len(idx)
        trace.append(total / B)
        lr *= tc.lr_decay
    return out, trace


def forward(model: FcnModel, x: TimeSeries):
    """Single-instance inference: final feature maps plus the prediction."""
    if x.d != model.config.in_channels:
        raise ModelError(
            f"instance {x.id!r} has {x.d} channels, model expects {model.config.in_channels}"
        )
    feats, _, logits, _ = _forward_batch(model, x.values[None], training=False)
    probs = _softmax(logits)[0]
    ci = int(np.argmax(probs))
    return feats[0], PredictionResult(
        predicted=LABELS[ci],
        confidence=float(probs[ci]),
        logits=logits[0],
        probabilities=probs,
    )


def predict_batch(model: FcnModel, instances: list[TimeSeries]):
    """Chunked batch inference; returns (feature_maps, probabilities, class_indices)."""
    feats_parts, probs_parts = [], []
    for start in range(0, len(instances), INFER_CHUNK):
        chunk = instances[start:start + INFER_CHUNK]
        X = np.stack([ts.values for ts in chunk])
        feats, _, logits, _ = _forward_batch(model, X, training=False)
        feats_parts.append(feats)
        probs_parts.append(_softmax(logits))
    feats = np.concatenate(feats_parts)
    probs = np.concatenate(probs_parts)
    return feats, probs, np.argmax(probs, axis=1)


def _normalize_cam(raw: np.ndarray) -> np.ndarray:
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def compute_cam(model: FcnModel, x: TimeSeries) -> AttributionMask:
    """Class activation map for the predicted class, min-max scaled to [0, 1]."""
    feats, pred = forward(model, x)
    ci = LABELS.index(pred.predicted)
    raw = model.params["linear/W"][ci] @ feats
    return AttributionMask(instance_id=x.id, weights=_normalize_cam(raw))


def compute_cams(model: FcnModel, instances: list[TimeSeries]) -> list[AttributionMask]:
    """Batched CAM extraction; identical output to compute_cam per instance."""
    feats, _, cls = predict_batch(model, instances)
    Wl = model.params["linear/W"]
    out = []
    for ts, fmap, ci in zip(instances, feats, cls):
        raw = Wl[int(ci)] @ fmap
        out.append(AttributionMask(instance_id=ts.id, weights=_normalize_cam(raw)))
    return out


def evaluate(model: FcnModel, ds: Dataset, split: str) -> ClassificationMetrics:
    insts, _, y = _split_tensors(ds, split)
    _, _, pred = predict_batch(model, insts)
    return classification_metrics(y, pred)


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def save_model(model: FcnModel, path) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {k: v.tolist() for k, v in model.params.items()},
        "stats": {k: v.tolist() for k, v in model.stats.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> FcnModel:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    cfg = FcnConfig(
        conv_blocks=tuple(tuple(b) for b in doc["config"]["conv_blocks"]),
        in_channels=doc["config"]["in_channels"],
        use_batch_norm=doc["config"]["use_batch_norm"],
        num_classes=doc["config"]["num_classes"],
        seed=doc["config"]["seed"],
    )
    params = {k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()}
    stats = {k: np.asarray(v, dtype=np.float64) for k, v in doc["stats"].items()}
    reference = init_model(cfg)
    for k, ref in reference.params.items():
        if k not in params or params[k].shape != ref.shape:
            raise ModelError(f"checkpoint parameter {k!r} missing or mis-shaped")
    for arr in list(params.values()) + list(stats.values()):
        if not np.all(np.isfinite(arr)):
            raise ModelError("checkpoint contains non-finite parameters")
    return FcnModel(config=cfg, params=params, stats=stats)
