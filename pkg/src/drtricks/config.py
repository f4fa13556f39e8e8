"""Run configuration: strict INI-style parsing and semantic digests.

Config files are flat key=value pairs under section headers. Parsing is
strict: an unknown section or key is an error, so typos cannot silently
fall back to defaults.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .data import TASKS
from .models import TrainConfig


class ConfigError(ValueError):
    pass


TTA_MODES = ("none", "flip", "rotate")

# section -> key -> (python type, default); ``str`` paths default to None.
_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "task": (str, None),
    },
    "data": {
        "train": (str, None),
        "dev": (str, None),
        "unlabeled": (str, None),
        "model": (str, None),
        "predictions": (str, None),
    },
    "synth": {
        "n": (int, 611),
        "dim": (int, 8),
        "noise": (float, 0.5),
        "size": (int, 64),
        "n_labeled": (int, 60),
        "n_unlabeled": (int, 600),
        "n_dev": (int, 10),
        "split_ratio": (float, 0.8),
    },
    "train": {
        "lr": (float, TrainConfig.lr),
        "weight_decay": (float, TrainConfig.weight_decay),
        "batch_size": (int, TrainConfig.batch_size),
        "epochs": (int, TrainConfig.epochs),
        "alpha": (float, TrainConfig.alpha),
        "aux": (str, TrainConfig.aux),
        "hidden": (int, TrainConfig.hidden),
        "dropout": (float, TrainConfig.dropout),
        "augment": (bool, False),
    },
    "pipeline": {
        "ensemble_k": (int, 1),
        "rpl_rounds": (int, 5),
        "tta": (str, "none"),
        "postprocess": (bool, False),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """One experiment's full settings; seed and output dir come from the CLI."""

    task: str
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    unlabeled_path: Optional[str] = None
    model_path: Optional[str] = None
    predictions_path: Optional[str] = None
    n: int = 611
    dim: int = 8
    noise: float = 0.5
    size: int = 64
    n_labeled: int = 60
    n_unlabeled: int = 600
    n_dev: int = 10
    split_ratio: float = 0.8
    lr: float = TrainConfig.lr
    weight_decay: float = TrainConfig.weight_decay
    batch_size: int = TrainConfig.batch_size
    epochs: int = TrainConfig.epochs
    alpha: float = TrainConfig.alpha
    aux: str = TrainConfig.aux
    hidden: int = TrainConfig.hidden
    dropout: float = TrainConfig.dropout
    augment: bool = False
    ensemble_k: int = 1
    rpl_rounds: int = 5
    tta: str = "none"
    postprocess: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.tta not in TTA_MODES:
            raise ConfigError(f"unknown tta mode {self.tta!r}; expected one of {TTA_MODES}")
        if self.ensemble_k < 1:
            raise ConfigError("ensemble_k must be >= 1")
        if self.rpl_rounds < 1:
            raise ConfigError("rpl_rounds must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must be in (0, 1)")

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(
                lr=self.lr,
                weight_decay=self.weight_decay,
                batch_size=self.batch_size,
                epochs=self.epochs,
                alpha=self.alpha,
                aux=self.aux,
                seed=seed,
                hidden=self.hidden,
                dropout=self.dropout,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        """Hex digest over every semantic field, in a canonical order.

        Paths and output locations are excluded: two runs pointing at
        different copies of the same data are the same experiment.
        """
        skip = {"train_path", "dev_path", "unlabeled_path", "model_path",
                "predictions_path"}
        payload = {f.name: getattr(self, f.name) for f in fields(self)
                   if f.name not in skip}
        blob = json.dumps(payload, sort_keys=True).encode("ascii")
        return hashlib.sha256(blob).hexdigest()[:16]


_FIELD_BY_KEY = {
    ("run", "task"): "task",
    ("data", "train"): "train_path",
    ("data", "dev"): "dev_path",
    ("data", "unlabeled"): "unlabeled_path",
    ("data", "model"): "model_path",
    ("data", "predictions"): "predictions_path",
}


def _coerce(section: str, key: str, raw: str):
    typ, _ = _SCHEMA[section][key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def load_config(path: Path | str) -> RunConfig:
    """Parse a config file strictly; unknown sections or keys are errors."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}] of {path}")
            field_name = _FIELD_BY_KEY.get((section, key), key)
            values[field_name] = _coerce(section, key, raw)
    if "task" not in values:
        raise ConfigError(f"config {path} must set task under [run]")
    return RunConfig(**values)
