"""Deep ensembles, test-time augmentation, and multi-scale aggregation.

All aggregation averages in probability / soft-mask space, over a fixed
branch order, so results are bit-deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import resize_bilinear
from .data import Dataset, Image
from .models import MLP, TrainConfig, fit, load_checkpoint, save_checkpoint, segment_soft


@dataclass(frozen=True)
class Ensemble:
    members: tuple[MLP, ...]
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        if len({m.head for m in self.members}) != 1:
            raise ValueError("ensemble members must share a head type")
        if len(self.seeds) != len(self.members):
            raise ValueError("need one seed per member")


class EnsembleMemberError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"member {index} failed: {cause}")
        self.index = index


def train_deep_ensemble(data: Dataset, cfg: TrainConfig, k: int = 5,
                        base_seed: int | None = None, aug=None) -> Ensemble:
    """Train k independent members with seeds base, base+1, ..., base+k-1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    base = cfg.seed if base_seed is None else base_seed
    members = []
    seeds = []
    for i in range(k):
        seed = base + i
        try:
            members.append(fit(data.task, data, replace(cfg, seed=seed), aug=aug))
        except Exception as exc:
            raise EnsembleMemberError(i, exc) from exc
        seeds.append(seed)
    return Ensemble(tuple(members), tuple(seeds))


def ensemble_predict(e: Ensemble, x) -> np.ndarray | float:
    """Arithmetic mean of member predictions, computed in member order."""
    head = e.members[0].head
    if head == "pixel":
        preds = [segment_soft(m, x) for m in e.members]
    elif head == "softmax":
        preds = [m.predict_proba(np.asarray(x)) for m in e.members]
        preds = [p[0] if np.asarray(x).ndim == 1 else p for p in preds]
    else:
        preds = [m.predict_scalar(np.atleast_2d(x)) for m in e.members]
        if np.asarray(x).ndim == 1:
            preds = [float(p[0]) for p in preds]
    out = preds[0]
    for p in preds[1:]:
        out = out + p
    return out / len(preds)


def member_variance(e: Ensemble, x) -> float:
    """Population variance of member predictions (scalar heads)."""
    vals = np.array([float(np.atleast_1d(m.predict_scalar(np.atleast_2d(x)))[0])
                     for m in e.members])
    return float(vals.var())


def _image_values(x) -> np.ndarray:
    return x.values if isinstance(x, Image) else np.asarray(x, dtype=np.float64)


def tta_flip_predict(predict_fn: Callable[[np.ndarray], np.ndarray], x) -> np.ndarray:
    """Mean prediction over {identity, horizontal flip, vertical flip}."""
    v = _image_values(x)
    branches = (v, v[:, ::-1], v[::-1, :])
    preds = [np.asarray(predict_fn(np.ascontiguousarray(b)), dtype=np.float64)
             for b in branches]
    return sum(preds[1:], preds[0]) / len(preds)


def tta_rotate_seg(predict_fn: Callable[[np.ndarray], np.ndarray], x) -> np.ndarray:
    """Rotation TTA for soft masks: rotate, predict, inverse-rotate, average.

    Angle set {90, 180, 270, 360}; inputs must be square so rotations are
    exact pixel permutations.
    """
    v = _image_values(x)
    if v.shape[0] != v.shape[1]:
        raise ValueError("rotation TTA requires a square image")
    acc = None
    for k in (1, 2, 3, 4):
        rotated = np.ascontiguousarray(np.rot90(v, k))
        pred = np.asarray(predict_fn(rotated), dtype=np.float64)
        aligned = np.ascontiguousarray(np.rot90(pred, -k, axes=(1, 2)))
        acc = aligned if acc is None else acc + aligned
    return acc / 4.0


def mpa_seg(predict_fn: Callable[[np.ndarray], np.ndarray], x,
            scales: Sequence[float] = (1.0, 1.1, 1.2, 1.3, 1.4)) -> np.ndarray:
    """Multi-scale aggregation: upscale, predict, resize back, average."""
    v = _image_values(x)
    if any(s < 1.0 for s in scales):
        raise ValueError("scales must be >= 1")
    h, w = v.shape
    acc = None
    for s in scales:
        sh, sw = int(round(h * s)), int(round(w * s))
        scaled = v if (sh, sw) == (h, w) else resize_bilinear(v, sh, sw)
        pred = np.asarray(predict_fn(scaled), dtype=np.float64)
        if pred.shape[1:] != (h, w):
            pred = np.stack([resize_bilinear(c, h, w) for c in pred])
        acc = pred if acc is None else acc + pred
    return np.clip(acc / len(scales), 0.0, 1.0)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def save_ensemble(directory: Path | str, e: Ensemble, prefix: str = "member") -> Path:
    """Write member checkpoints plus a manifest listing paths and seeds."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (m, seed) in enumerate(zip(e.members, e.seeds)):
        name = f"{prefix}_{i}.ckpt"
        save_checkpoint(directory / name, m)
        entries.append({"path": name, "seed": seed})
    manifest = directory / "ensemble.json"
    manifest.write_text(json.dumps({"members": entries}, indent=2) + "\n")
    return manifest


def load_ensemble(manifest: Path | str) -> Ensemble:
    manifest = Path(manifest)
    spec = json.loads(manifest.read_text())
    members = []
    seeds = []
    for entry in spec["members"]:
        members.append(load_checkpoint(manifest.parent / entry["path"]))
        seeds.append(int(entry["seed"]))
    return Ensemble(tuple(members), tuple(seeds))
