"""Small differentiable learners and their losses.

Desk-scale stand-ins for the full-resolution backbones: a one-hidden-layer
MLP for classification/regression and a per-pixel linear segmenter over a
small local-feature stack. Training uses mini-batch AdamW (decoupled weight
decay, constant learning rate).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import NUM_CLASSES, Dataset, Image, MaskSet, SoftMaskSet

EPS_CLAMP = 1e-7
DICE_EPS = 1e-6

HEADS = ("softmax", "scalar", "pixel")
_HEAD_CODES = {h: i for i, h in enumerate(HEADS)}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, message: str = "non-finite training loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class CheckpointError(ValueError):
    """Malformed or incompatible model checkpoint."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 150
    alpha: float = 0.5
    aux: str = "bce"
    seed: int = 0
    hidden: int = 32
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.alpha < 0:
            raise ValueError("auxiliary weight must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.aux not in ("bce", "focal"):
            raise ValueError("aux loss must be 'bce' or 'focal'")


def derive_seed(seed: int, *key: int) -> int:
    """Deterministic child seed for sub-tasks (rounds, members, init)."""
    ss = np.random.SeedSequence((int(seed), *map(int, key)))
    return int(ss.generate_state(1)[0])


def round_half_away(x) -> np.ndarray:
    """Nearest integer with .5 rounded away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def regressor_class(raw, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Class decision of a scalar regressor: round, then clamp to label range."""
    return np.clip(round_half_away(raw), 0, num_classes - 1).astype(int)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

class MLP:
    """Fully connected net with ReLU hidden layers and a task head.

    Heads: ``softmax`` (C-way probabilities), ``scalar`` (one real output),
    ``pixel`` (3 sigmoid outputs per feature row, used by the segmenter).
    Dropout is applied to hidden activations at training time only.
    """

    def __init__(self, dims: list[int], head: str, dropout: float = 0.0, seed: int = 0):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if len(dims) < 2:
            raise ValueError("need at least input and output dimensions")
        self.dims = list(int(d) for d in dims)
        self.head = head
        self.dropout = float(dropout)
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for din, dout in zip(self.dims[:-1], self.dims[1:]):
            scale = np.sqrt(2.0 / din)
            self.weights.append(rng.standard_normal((din, dout)) * scale)
            self.biases.append(np.zeros(dout))

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        out, _ = self._forward_cached(x, train=train, rng=rng)
        return out

    def _forward_cached(self, x, train=False, rng=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [x]
        masks = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
                if train and self.dropout > 0.0:
                    keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                    h = h * keep
                    masks.append(keep)
                else:
                    masks.append(None)
                acts.append(h)
        logits = h
        if self.head == "softmax":
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
        elif self.head == "scalar":
            out = logits[:, 0]
        else:  # pixel
            out = 1.0 / (1.0 + np.exp(-logits))
        return out, (acts, masks, logits, out)

    def backward(self, cache, grad_logits: np.ndarray):
        """Gradients of all parameters given dLoss/dlogits."""
        acts, masks, _, _ = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        g = grad_logits
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
                if masks[i - 1] is not None:
                    g = g * masks[i - 1]
                g = g * (acts[i] > 0.0)
        return grads_w, grads_b

    # -- convenience --------------------------------------------------------

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.head != "softmax":
            raise ValueError("predict_proba requires a softmax head")
        return self.forward(x)

    def predict_scalar(self, x: np.ndarray) -> np.ndarray:
        if self.head != "scalar":
            raise ValueError("predict_scalar requires a scalar head")
        return self.forward(x)

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "MLP":
        clone = MLP(self.dims, self.head, self.dropout, seed=0)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


def forward_classifier(m: MLP, x: np.ndarray) -> np.ndarray:
    """Probability vector(s) over classes for feature input."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != m.dims[0]:
        raise ValueError(f"input dimension {x.shape[-1]} != model input {m.dims[0]}")
    p = m.predict_proba(x)
    return p[0] if single else p


def forward_regressor(m: MLP, x: np.ndarray) -> np.ndarray | float:
    """Raw scalar output(s) for feature input."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if x.shape[-1] != m.dims[0]:
        raise ValueError(f"input dimension {x.shape[-1]} != model input {m.dims[0]}")
    out = m.predict_scalar(x)
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# segmentation features and prediction
# ---------------------------------------------------------------------------

SEG_FEATURE_RADII = (1, 2, 4)
SEG_FEATURE_DIM = 1 + len(SEG_FEATURE_RADII)


def _box_mean(values: np.ndarray, radius: int) -> np.ndarray:
    """Exact edge-clipped box mean over (2r+1)^2 windows via integral image."""
    h, w = values.shape
    pad = np.zeros((h + 1, w + 1))
    pad[1:, 1:] = np.cumsum(np.cumsum(values, axis=0), axis=1)
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    total = (
        pad[np.ix_(y1, x1)] - pad[np.ix_(y0, x1)] - pad[np.ix_(y1, x0)] + pad[np.ix_(y0, x0)]
    )
    area = np.outer(y1 - y0, x1 - x0)
    return total / area


def seg_features(image: Image | np.ndarray) -> np.ndarray:
    """Per-pixel feature stack (H*W, 4): raw value plus box means r=1,2,4."""
    v = image.values if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    stack = [v] + [_box_mean(v, r) for r in SEG_FEATURE_RADII]
    return np.stack(stack, axis=-1).reshape(-1, SEG_FEATURE_DIM)


def segment_soft(m: MLP, image: Image | np.ndarray) -> np.ndarray:
    """Soft lesion prediction (3, H, W) for one image."""
    v = image.values if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    out = m.forward(seg_features(v))
    return out.reshape(v.shape[0], v.shape[1], NUM_CLASSES).transpose(2, 0, 1)


def new_model(task: str, in_dim: int, cfg: TrainConfig) -> MLP:
    """Fresh model for a task, initialized from cfg.seed."""
    init_seed = derive_seed(cfg.seed, 0xA11CE)
    if task == "segmentation":
        return MLP([SEG_FEATURE_DIM, NUM_CLASSES], "pixel", dropout=0.0, seed=init_seed)
    head = "scalar" if task in ("quality", "grading") else "softmax"
    return MLP([in_dim, cfg.hidden, NUM_CLASSES if head == "softmax" else 1],
               head, dropout=cfg.dropout, seed=init_seed)


# ---------------------------------------------------------------------------
# losses (each returns scalar loss and gradient wrt the prediction)
# ---------------------------------------------------------------------------

def _chan(x) -> np.ndarray:
    if isinstance(x, (MaskSet, SoftMaskSet)):
        return np.asarray(x.channels, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def class_weights(y) -> np.ndarray:
    """Inverse-frequency log weights: w_c = log(N_pix / (count_c + 1))."""
    yc = _chan(y)
    n_pix = yc.shape[1] * yc.shape[2]
    counts = yc.reshape(yc.shape[0], -1).sum(axis=1)
    return np.log(n_pix / (counts + 1.0))


def weighted_dice_loss(y, yhat, weights: Optional[np.ndarray] = None):
    """Class-weighted soft dice loss and its gradient wrt yhat."""
    yc, ph = _chan(y), _chan(yhat)
    if yc.shape != ph.shape:
        raise ValueError("mask shapes must match")
    w = class_weights(yc) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.all(w == 0.0):
        raise ValueError("all-zero class weights make the dice denominator degenerate")
    wb = w[:, None, None]
    num = float(np.sum(wb * yc * ph))
    den = float(np.sum(wb * (yc + ph))) + DICE_EPS
    loss = 1.0 - 2.0 * num / den
    grad = -2.0 * wb * (yc * den - num) / (den * den)
    return loss, grad


def focal_loss(y, yhat):
    """Multi-label focal variant: -(1-p)log p for positives, -p log(1-p) otherwise."""
    yc, ph = _chan(y), np.clip(_chan(yhat), EPS_CLAMP, 1.0 - EPS_CLAMP)
    n = ph.size
    pos = -(1.0 - ph) * np.log(ph)
    neg = -ph * np.log(1.0 - ph)
    loss = float(np.sum(np.where(yc == 1.0, pos, neg))) / n
    dpos = np.log(ph) - (1.0 - ph) / ph
    dneg = -np.log(1.0 - ph) + ph / (1.0 - ph)
    grad = np.where(yc == 1.0, dpos, dneg) / n
    return loss, grad


def bce_loss(y, yhat):
    """Mean binary cross-entropy over pixels and channels."""
    yc, ph = _chan(y), np.clip(_chan(yhat), EPS_CLAMP, 1.0 - EPS_CLAMP)
    n = ph.size
    loss = float(-np.sum(yc * np.log(ph) + (1.0 - yc) * np.log(1.0 - ph))) / n
    grad = (ph - yc) / (ph * (1.0 - ph)) / n
    return loss, grad


def seg_total_loss(y, yhat, aux: str = "bce", alpha: float = 0.5,
                   weights: Optional[np.ndarray] = None):
    """Weighted dice plus alpha times the auxiliary (focal or bce) loss."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    dice, dice_grad = weighted_dice_loss(y, yhat, weights=weights)
    aux_fn = {"bce": bce_loss, "focal": focal_loss}[aux]
    aux_val, aux_grad = aux_fn(y, yhat)
    return dice + alpha * aux_val, dice_grad + alpha * aux_grad


def smooth_l1(pred, target, beta: float = 1.0):
    """Huber-style smooth L1 (mean over elements) and gradient wrt pred."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    d = p - t
    small = np.abs(d) < beta
    vals = np.where(small, d * d / (2.0 * beta), np.abs(d) - beta / 2.0)
    grads = np.where(small, d / beta, np.sign(d))
    n = max(vals.size, 1)
    return float(vals.sum()) / n, grads / n


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean CE over a batch; gradient is returned wrt the logits."""
    b = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    loss = float(-np.sum(np.log(np.clip(probs[np.arange(b), labels], EPS_CLAMP, 1.0)))) / b
    grad_logits = (probs - onehot) / b
    return loss, grad_logits


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay, canonical moment constants."""

    def __init__(self, params: list[np.ndarray], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p -= self.lr * self.wd * p


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(model: MLP, data: Dataset, cfg: TrainConfig, aug=None) -> MLP:
    """Mini-batch AdamW training; deterministic for a fixed cfg.seed.

    ``aug`` is an optional augmentation pipeline applied per sample per epoch
    (image tasks only). Raises TrainingDivergedError on non-finite loss.
    """
    if len(data) == 0:
        raise ValueError("training data must be nonempty")
    rng = np.random.default_rng(derive_seed(cfg.seed, 0x7EA1))
    opt = AdamW(model.params(), cfg.lr, cfg.weight_decay)

    if model.head == "pixel":
        _train_segmenter(model, data, cfg, opt, rng, aug)
        return model

    feats = np.stack([s.features for s in data.samples])
    labels = np.array([s.label for s in data.samples])
    if any(l is None for l in data.labels()):
        raise ValueError("training requires labeled samples")
    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            xb, yb = feats[idx], labels[idx]
            out, cache = model._forward_cached(xb, train=True, rng=rng)
            if model.head == "softmax":
                loss, grad_logits = cross_entropy(out, yb)
            else:
                loss, grad_out = smooth_l1(out, yb.astype(np.float64))
                grad_logits = grad_out[:, None]
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            gw, gb = model.backward(cache, grad_logits)
            opt.step(gw + gb)
    return model


def _train_segmenter(model, data, cfg, opt, rng, aug) -> None:
    from .augment import augment as apply_aug  # local import to avoid a cycle

    plain = []
    for s in data.samples:
        if s.image is None or s.masks is None:
            raise ValueError("segmentation training requires images with masks")
        plain.append((seg_features(s.image), np.asarray(s.masks.channels, dtype=np.float64)))

    for epoch in range(cfg.epochs):
        for idx in _batches(len(data), cfg.batch_size, rng):
            loss_sum = 0.0
            grads_w = [np.zeros_like(w) for w in model.weights]
            grads_b = [np.zeros_like(b) for b in model.biases]
            for i in idx:
                if aug is not None:
                    s = data.samples[i]
                    img, masks = apply_aug(s.image, aug, rng, masks=s.masks)
                    f = seg_features(img)
                    yc = np.asarray(masks.channels, dtype=np.float64)
                else:
                    f, yc = plain[i]
                h, w = yc.shape[1], yc.shape[2]
                out, cache = model._forward_cached(f, train=True, rng=rng)
                yhat = out.reshape(h, w, NUM_CLASSES).transpose(2, 0, 1)
                loss, grad_yhat = seg_total_loss(yc, yhat, aux=cfg.aux, alpha=cfg.alpha)
                loss_sum += loss
                grad_flat = grad_yhat.transpose(1, 2, 0).reshape(-1, NUM_CLASSES)
                grad_logits = grad_flat * out * (1.0 - out)
                gw, gb = model.backward(cache, grad_logits)
                for acc, g in zip(grads_w + grads_b, gw + gb):
                    acc += g
            if not np.isfinite(loss_sum):
                raise TrainingDivergedError(epoch)
            scale = 1.0 / len(idx)
            opt.step([g * scale for g in grads_w + grads_b])


def fit(task: str, data: Dataset, cfg: TrainConfig, aug=None) -> MLP:
    """Create a fresh model for the task and train it."""
    in_dim = data.feature_dim or SEG_FEATURE_DIM
    model = new_model(task, in_dim, cfg)
    return train(model, data, cfg, aug=aug)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SKL1"


def save_checkpoint(path: Path | str, model: MLP) -> None:
    """Versioned binary checkpoint: magic, head, dims, little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BBd", _HEAD_CODES[model.head], len(model.dims), model.dropout))
        fh.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        for w, b in zip(model.weights, model.biases):
            fh.write(w.astype("<f8").tobytes())
            fh.write(b.astype("<f8").tobytes())


def load_checkpoint(path: Path | str) -> MLP:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    head_code, n_dims, dropout = struct.unpack_from("<BBd", data, 4)
    if head_code >= len(HEADS):
        raise CheckpointError(f"{path}: unknown head code {head_code}")
    offset = 4 + struct.calcsize("<BBd")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, offset))
    offset += 4 * n_dims
    model = MLP(dims, HEADS[head_code], dropout=dropout, seed=0)
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        wn = din * dout * 8
        model.weights[i] = np.frombuffer(data[offset : offset + wn], dtype="<f8").reshape(din, dout).copy()
        offset += wn
        model.biases[i] = np.frombuffer(data[offset : offset + dout * 8], dtype="<f8").copy()
        offset += dout * 8
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing or missing parameter bytes")
    return model
