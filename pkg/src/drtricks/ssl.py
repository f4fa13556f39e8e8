"""Pseudo-labeling and reliable pseudo labeling (RPL).

Predictions on the unlabeled pool are bucketed per predicted class and
sorted by confidence. RPL selects a growing top fraction per bucket each
round, retrains a fresh model on labeled plus selected data, regenerates
pseudo labels with the newest model, and repeats for T rounds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, Sample
from .models import (
    MLP,
    NUM_CLASSES,
    TrainConfig,
    derive_seed,
    fit,
    new_model,
    regressor_class,
    round_half_away,
    train,
)


@dataclass
class RPLConfig:
    base: TrainConfig
    rounds: int = 5

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("need at least one round")


@dataclass(frozen=True)
class PseudoBuckets:
    """Per predicted class: samples sorted by descending confidence, then id."""

    entries: dict[int, tuple[tuple[Sample, float], ...]]

    def bucket(self, k: int) -> tuple[tuple[Sample, float], ...]:
        return self.entries.get(k, ())

    def sizes(self) -> dict[int, int]:
        return {k: len(v) for k, v in self.entries.items()}


def confidence_classifier(p: np.ndarray) -> float:
    """Max softmax probability; higher is more confident."""
    p = np.asarray(p, dtype=np.float64)
    if not np.isclose(p.sum(), 1.0, atol=1e-6):
        raise ValueError("probability vector must sum to 1")
    return float(p.max())


def confidence_regressor(raw: float) -> float:
    """Negative distance of the raw output to its nearest integer."""
    raw = float(raw)
    return -abs(float(round_half_away(raw)) - raw)


def pseudo_label(model: MLP, unlabeled: Dataset) -> PseudoBuckets:
    """Assign each unlabeled sample a predicted class and confidence."""
    entries: dict[int, list[tuple[Sample, float]]] = {k: [] for k in range(NUM_CLASSES)}
    if len(unlabeled) > 0:
        feats = np.stack([s.features for s in unlabeled.samples])
        if model.head == "softmax":
            probs = model.predict_proba(feats)
            preds = probs.argmax(axis=1)
            confs = probs.max(axis=1)
        elif model.head == "scalar":
            raw = model.predict_scalar(feats)
            preds = regressor_class(raw)
            confs = np.array([confidence_regressor(r) for r in raw])
        else:
            raise ValueError("pseudo labeling requires a classifier or regressor head")
        for s, k, c in zip(unlabeled.samples, preds, confs):
            entries[int(k)].append((s, float(c)))
    for k in entries:
        entries[k].sort(key=lambda item: (-item[1], item[0].id))
    return PseudoBuckets({k: tuple(v) for k, v in entries.items()})


def select_reliable(buckets: PseudoBuckets, t: int, rounds: int) -> list[Sample]:
    """Top floor(t/T * bucket size) entries per class, labeled with the class."""
    if not 1 <= t <= rounds:
        raise ValueError(f"round index {t} outside 1..{rounds}")
    selected: list[Sample] = []
    for k in sorted(buckets.entries):
        bucket = buckets.entries[k]
        take = (t * len(bucket)) // rounds
        for sample, _conf in bucket[:take]:
            selected.append(replace(sample, label=k))
    return selected


def _audit_rows(buckets: PseudoBuckets, t: int, rounds: int) -> list[list]:
    rows = []
    for k in sorted(buckets.entries):
        bucket = buckets.entries[k]
        take = (t * len(bucket)) // rounds
        min_conf = repr(bucket[take - 1][1]) if take else ""
        rows.append([t, k, len(bucket), take, min_conf])
    return rows


def write_audit_log(path: Path | str, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "class", "bucket_size", "selected", "min_conf_selected"])
        writer.writerows(rows)


def rpl_train(
    labeled: Dataset,
    unlabeled: Dataset,
    cfg: RPLConfig,
    aug=None,
    audit_path: Optional[Path | str] = None,
) -> MLP:
    """Reliable pseudo labeling: T rounds of select-and-retrain from scratch."""
    if len(labeled) == 0:
        raise ValueError("labeled set must be nonempty")
    model = fit(labeled.task, labeled, replace(cfg.base, seed=derive_seed(cfg.base.seed, 0)),
                aug=aug)
    audit: list[list] = []
    if len(unlabeled) > 0:
        for t in range(1, cfg.rounds + 1):
            buckets = pseudo_label(model, unlabeled)
            selected = select_reliable(buckets, t, cfg.rounds)
            audit.extend(_audit_rows(buckets, t, cfg.rounds))
            combined = Dataset(labeled.samples + tuple(selected), labeled.task)
            round_cfg = replace(cfg.base, seed=derive_seed(cfg.base.seed, t))
            model = fit(labeled.task, combined, round_cfg, aug=aug)
    if audit_path is not None:
        write_audit_log(audit_path, audit)
    return model


def naive_pl_train(labeled: Dataset, unlabeled: Dataset, cfg: TrainConfig,
                   aug=None, audit_path: Optional[Path | str] = None) -> MLP:
    """Single-round pseudo labeling keeping every pseudo label."""
    return rpl_train(labeled, unlabeled, RPLConfig(base=cfg, rounds=1),
                     aug=aug, audit_path=audit_path)
