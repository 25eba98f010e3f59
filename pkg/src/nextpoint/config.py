"""Experiment configuration: nested dataclasses, JSON files and dotted overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .decoder import DecoderConfig
from .grpo import RftConfig
from .policy import ModelConfig
from .scene import SceneConfig
from .tokenizer import encoded_length
from .train import SftConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 500
    n_val: int = 500


@dataclass(frozen=True)
class DecoderTrainConfig:
    grid: int = 16
    steps: int = 1500
    batch: int = 8
    lr: float = 3e-3
    min_heldout_iou: float = 0.7


@dataclass(frozen=True)
class EvalConfig:
    r_thresh: float = 6.0


@dataclass(frozen=True)
class Seeds:
    data: int = 1
    init: int = 0
    decoder: int = 0
    sft: int = 0
    rft: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    decoder: DecoderTrainConfig = field(default_factory=DecoderTrainConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    rft: RftConfig = field(default_factory=RftConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"

    def decoder_config(self) -> DecoderConfig:
        m = self.model
        return DecoderConfig(L=m.L, d=m.d, grid=self.decoder.grid, width=m.width, height=m.height)

    def validate(self) -> None:
        """Check every section against its module's preconditions; raises ConfigError."""
        try:
            self.scene.validate()
            self.model.validate()
            self.sft.validate()
            self.rft.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        s, m = self.scene, self.model
        if (s.width, s.height) != (m.width, m.height):
            raise ConfigError(f"scene is {s.width}x{s.height} but the model expects {m.width}x{m.height}")
        need = encoded_length(s.count_max, m.L)
        if m.max_len < need:
            raise ConfigError(f"model.max_len={m.max_len} is shorter than the densest target ({need} tokens)")
        if self.data.n_train < 1 or self.data.n_val < 1:
            raise ConfigError("data.n_train and data.n_val must be positive")
        if self.eval.r_thresh <= 0:
            raise ConfigError("eval.r_thresh must be positive")
        d = self.decoder
        if d.grid < 1 or d.steps < 0 or d.batch < 1 or d.lr <= 0:
            raise ConfigError("decoder grid, batch and lr must be positive and steps non-negative")
        if self.sft.alpha > 0 and m.L < 1:
            raise ConfigError("sft.alpha > 0 needs at least one latent token (model.L)")


def to_dict(config: ExperimentConfig) -> dict:
    return asdict(config)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(default, value, path + name)
    return cls(**kwargs)


def _coerce(default, value, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def _set_path(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=v`` with ``v`` read as JSON when possible, else as a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Defaults, then the file, then ``key=value`` overrides; validated before returning."""
    tree = to_dict(ExperimentConfig())
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            file_tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        _merge(tree, file_tree, "")
    for item in overrides:
        key, value = parse_override(item)
        _set_path(tree, key, value)
    config = _build(ExperimentConfig, tree, "")
    config.validate()
    return config


def _merge(base: dict, extra: dict, path: str) -> None:
    if not isinstance(extra, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def dumps_config(config: ExperimentConfig) -> str:
    return json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n"
