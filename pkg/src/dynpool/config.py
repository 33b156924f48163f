"""Experiment configuration: one JSON file fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .layout import PoolingExpert, PyramidConfig, default_experts
from .model import ModelDims
from . import tasks


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 120

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not (0 < self.rms_decay < 1):
            raise ConfigError("rms_decay must lie in (0, 1)")


@dataclass(frozen=True)
class TaskSettings:
    grid_h: int = 10
    grid_w: int = 10
    fine_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.fine_fraction <= 1.0):
            raise ConfigError("fine_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelDims
    pyramid: PyramidConfig
    train: TrainSettings = field(default_factory=TrainSettings)
    task: TaskSettings = field(default_factory=TaskSettings)
    out_dir: str = "runs/default"

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            md = dict(d["model"])
            md["max_grid"] = tuple(md["max_grid"])
            model = ModelDims(**md)
            pd = dict(d["pyramid"])
            pd["dpe_layers"] = tuple(pd.get("dpe_layers", ()))
            pd["experts"] = tuple(
                PoolingExpert(tuple(e["kernel"]), float(e["rate"]))
                for e in pd.get("experts", [])
            ) or default_experts()
            pyramid = PyramidConfig(**pd)
            train = TrainSettings(**d.get("train", {}))
            task = TaskSettings(**d.get("task", {}))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc
        pyramid.validate_for(model.n_layers)
        return cls(model=model, pyramid=pyramid, train=train, task=task,
                   out_dir=d.get("out_dir", "runs/default"))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def toy_config(dpe_layers=(1,), out_dir="runs/toy", seed=0, steps=2000) -> ExperimentConfig:
    """The small reference setup: 4 layers, width 64, one pooling layer."""
    model = ModelDims(
        n_layers=4, d=64, n_heads=4, m=128,
        vocab=tasks.VOCAB_SIZE,
        max_grid=(tasks.MAX_GRID, tasks.MAX_GRID),
        max_seq=tasks.MAX_GRID * tasks.MAX_GRID + 24,
        n_pixel_codes=tasks.N_CODES,
    )
    pyramid = PyramidConfig(dpe_layers=tuple(dpe_layers), experts=default_experts())
    return ExperimentConfig(
        model=model,
        pyramid=pyramid,
        train=TrainSettings(steps=steps, seed=seed),
        task=TaskSettings(),
        out_dir=out_dir,
    )
