"""Run configuration: a flat dataclass read from ``section.key = value`` text.

Known keys::

    run.seed
    data.dataset            blobs | mnist | shapes
    data.n_classes, data.n_per_class, data.dim, data.spread
    data.n_train, data.n_test, data.max_objects, data.data_dir
    model.d, model.hidden, model.backbone, model.backbone_widths, model.M, model.coupling, model.lam
    trainer.T, trainer.epochs, trainer.batch_size, trainer.lr, trainer.weight_decay,
    trainer.grad_clip_norm, trainer.schedule, trainer.probe_enabled,
    trainer.telemetry_window, trainer.record_wall_time, trainer.compute_matched
    inference.single_block, inference.votes

Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Unknown key, unparsable value or violated constraint."""


@dataclass
class TrainConfig:
    seed: int = 0
    # data
    dataset: str = "blobs"
    n_classes: int = 3
    n_per_class: int = 200
    dim: int = 8
    spread: float = 0.5
    n_train: int = 500
    n_test: int = 100
    max_objects: int = 3
    data_dir: str = ""
    # model
    d: int = 16
    hidden: int = 0  # 0 means 4 * d
    backbone: str = "mlp"
    backbone_widths: tuple = (256, 256)
    M: int = 8
    coupling: str = "canonical"
    lam: float = 1.0
    # trainer
    T: int = 3
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    schedule: str = "sequential"
    probe_enabled: bool = False
    telemetry_window: int = 10
    record_wall_time: bool = False
    compute_matched: bool = False
    # inference
    single_block: int = 0
    votes: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.T >= 1, "trainer.T must be >= 1"),
            (self.lr > 0, "trainer.lr must be > 0"),
            (self.grad_clip_norm > 0, "trainer.grad_clip_norm must be > 0"),
            (self.epochs >= 0, "trainer.epochs must be >= 0"),
            (self.batch_size >= 1, "trainer.batch_size must be >= 1"),
            (self.d >= 1, "model.d must be >= 1"),
            (self.lam >= 0, "model.lam must be >= 0"),
            (self.schedule in ("sequential", "parallel"), "trainer.schedule must be sequential or parallel"),
            (self.dataset in ("blobs", "mnist", "shapes"), "data.dataset must be blobs, mnist or shapes"),
            (self.backbone in ("mlp", "conv2"), "model.backbone must be mlp or conv2"),
            (self.coupling in ("ot", "canonical"), "model.coupling must be ot or canonical"),
            (self.telemetry_window >= 1, "trainer.telemetry_window must be >= 1"),
            (0 <= self.single_block < self.T, "inference.single_block must index a block"),
            (self.votes >= 1, "inference.votes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def hidden_width(self) -> int:
        return self.hidden or 4 * self.d

    @property
    def task(self) -> str:
        return "detection" if self.dataset == "shapes" else "classification"

    def sequential_epochs(self) -> int:
        """Raw epochs, or epochs / T when matching parallel's backbone-update count."""
        if self.compute_matched and self.schedule == "sequential":
            return max(1, -(-self.epochs // self.T))
        return self.epochs

    def to_text(self) -> str:
        lines = []
        for key, name in KEYS.items():
            v = getattr(self, name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


KEYS = {
    "run.seed": "seed",
    "data.dataset": "dataset",
    "data.n_classes": "n_classes",
    "data.n_per_class": "n_per_class",
    "data.dim": "dim",
    "data.spread": "spread",
    "data.n_train": "n_train",
    "data.n_test": "n_test",
    "data.max_objects": "max_objects",
    "data.data_dir": "data_dir",
    "model.d": "d",
    "model.hidden": "hidden",
    "model.backbone": "backbone",
    "model.backbone_widths": "backbone_widths",
    "model.M": "M",
    "model.coupling": "coupling",
    "model.lam": "lam",
    "trainer.T": "T",
    "trainer.epochs": "epochs",
    "trainer.batch_size": "batch_size",
    "trainer.lr": "lr",
    "trainer.weight_decay": "weight_decay",
    "trainer.grad_clip_norm": "grad_clip_norm",
    "trainer.schedule": "schedule",
    "trainer.probe_enabled": "probe_enabled",
    "trainer.telemetry_window": "telemetry_window",
    "trainer.record_wall_time": "record_wall_time",
    "trainer.compute_matched": "compute_matched",
    "inference.single_block": "single_block",
    "inference.votes": "votes",
}

_FIELD_TYPES = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[KEYS[key]]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_assignments(lines, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        out[KEYS[key]] = _convert(key, raw)
    return out


def load_config(path=None, overrides=(), **base) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``K=V`` overrides in order."""
    values = dict(base)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
        values.update(parse_assignments(text.splitlines(), str(p)))
    values.update(parse_assignments(overrides, "--set"))
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))
