"""Flat key=value experiment configuration.

One `key=value` pair per line; `#` starts a comment; blank lines and
whitespace around the separator are ignored. Unknown keys are errors, so a
typo never silently falls back to a default. Values the rest of the package
treats as fixed (embedding size, distance metric, loss, optimizer) are
validated here rather than silently accepted.
"""

import os
from dataclasses import dataclass, fields
from typing import Dict, Tuple

from .errors import ConfigError, GridError
from .model import EMBEDDING_DIM, ModelConfig
from .tiling import GridSpec
from .trainer import TrainConfig

DISTANCE_METRICS = ("euclidean",)
EVALUATOR_CHOICES = ("fc", "knn")
VOTE_CHOICES = ("none", "majority", "probability")


@dataclass
class ExperimentConfig:
    # experiment
    data_root: str = ""
    out_dir: str = ""
    grid: str = "6x7"
    seed: int = 0
    evaluator: str = "fc"
    vote: str = "majority"
    # model
    input_size: int = 224
    stage_widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    # training
    loss: str = "cross_entropy"
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0005
    learning_rate: float = 0.001
    batch_size: int = 8
    max_epochs: int = 200
    early_stopping: int = 20
    # retrieval head
    embedding_size: int = EMBEDDING_DIM
    knn_k: int = 5
    distance_metric: str = "euclidean"

    def __post_init__(self):
        try:
            GridSpec.parse(self.grid)
        except GridError as e:
            # a malformed grid *string* is a configuration problem
            raise ConfigError(str(e)) from None
        if self.evaluator not in EVALUATOR_CHOICES:
            raise ConfigError(f"evaluator must be one of {EVALUATOR_CHOICES}, "
                              f"got {self.evaluator!r}")
        if self.vote not in VOTE_CHOICES:
            raise ConfigError(f"vote must be one of {VOTE_CHOICES}, got {self.vote!r}")
        if self.embedding_size != EMBEDDING_DIM:
            raise ConfigError(f"embedding_size is fixed at {EMBEDDING_DIM}")
        if self.distance_metric not in DISTANCE_METRICS:
            raise ConfigError(f"distance_metric must be one of {DISTANCE_METRICS}, "
                              f"got {self.distance_metric!r}")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be positive")
        # delegate the remaining range checks to the owning config types
        self.model_config()
        self.train_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_size=self.input_size, stage_widths=self.stage_widths,
                           blocks_per_stage=self.blocks_per_stage)

    def train_config(self) -> TrainConfig:
        return TrainConfig(loss=self.loss, optimizer=self.optimizer,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.early_stopping,
                           seed=self.seed)

    def grid_spec(self) -> GridSpec:
        return GridSpec.parse(self.grid)


_FIELD_KINDS = {f.name: type(getattr(ExperimentConfig(), f.name))
                for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_KINDS:
        raise ConfigError(f"unknown config key {key!r}")
    if key == "stage_widths":
        try:
            return tuple(int(p) for p in raw.split(","))
        except ValueError:
            raise ConfigError(f"stage_widths must be comma-separated integers, got {raw!r}") from None
    kind = _FIELD_KINDS[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def parse_config_text(text: str) -> ExperimentConfig:
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        return parse_config_text(text)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if f.name == "stage_widths":
            v = ",".join(str(w) for w in v)
        elif isinstance(v, float):
            v = f"{v:g}"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        f.write(format_config(cfg))


RESOLVED_NAME = "resolved.cfg"


def write_resolved(cfg: ExperimentConfig, out_dir) -> None:
    """Record the fully resolved config (and tool version) in an output
    directory, so the run can be repeated from that file alone."""
    from . import __version__

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RESOLVED_NAME), "w") as f:
        f.write(f"# tilevote {__version__}\n")
        f.write(format_config(cfg))
