"""Hyperparameters and the ``key = value`` config file format.

Keys are namespaced by section: ``data.*``, ``slowae.*``, ``controller.*``
and ``rlt.*``. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config text or an unknown key."""


@dataclass
class DataConfig:
    sample_rate_hz: int = 2000
    num_classes: int = 4
    clip_seconds: float = 0.5
    num_train_clips: int = 16
    eval_clip_seconds: float = 2.0
    num_eval_clips: int = 256


@dataclass
class SlowAEConfig:
    downsample: int = 8
    channels: int = 4
    k: int = 7
    margin: float = 0.0  # 0 -> 1/k
    width: int = 32
    encoder_blocks: int = 4
    cond_blocks: int = 2
    decoder_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    anti_causal: bool = True
    penalty: str = "gs"
    gs_squared: bool = True
    mu: float = 100.0
    noise_sigma: float = 0.01
    lr: float = 3e-3
    lr_drop_factor: float = 3.0
    lr_drop_at: float = 0.9
    batch_size: int = 16
    steps: int = 2000
    polyak_decay: float = 0.99
    max_run_length: int = 256


@dataclass
class ControllerConfig:
    lambda_init: float = 1e-2
    target_rate_hz: float = 20.0
    epsilon: float = 1e-2
    delta: float = 1e-2
    lambda_min: float = 1e-8
    lambda_max: float = 1e8


@dataclass
class RLTConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    max_events: int = 512
    offset_buckets: int = 512
    offset_bucket_width: int = 1
    relative_distance: int = 128
    embed_channel_in: bool = True
    embed_offset_in: bool = True
    embed_channel_out: bool = True
    embed_offset_out: bool = True
    embed_global_position: bool = False
    embed_channel_position: bool = False
    catch_all_prob: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 1000
    nucleus_p: float = 0.8


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    slowae: SlowAEConfig = field(default_factory=SlowAEConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    rlt: RLTConfig = field(default_factory=RLTConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        cfg = cls()
        for key, value in d.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    _set(cfg, f"{key}.{sub}", v)
            else:
                _set(cfg, key, value)
        return cfg

    def dumps(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section in ("data", "slowae", "controller", "rlt"):
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                if isinstance(value, tuple):
                    value = ", ".join(map(str, value))
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{section}.{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(kind, raw):
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int):
            return float(raw)
        if typing.get_origin(kind) is tuple:
            return tuple(int(x) for x in raw)
        return raw
    text = raw.strip()
    if kind is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if typing.get_origin(kind) is tuple:
        return tuple(int(x) for x in text.replace(",", " ").split())
    return text


def _set(cfg: Config, key: str, raw) -> None:
    parts = key.split(".")
    if parts == ["seed"]:
        cfg.seed = int(raw)
        return
    if len(parts) != 2 or parts[0] not in ("data", "slowae", "controller", "rlt"):
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, parts[0])
    hints = typing.get_type_hints(type(section))
    if parts[1] not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(section, parts[1], _coerce(hints[parts[1]], raw))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        _set(cfg, key, value)
    return cfg


def load_config(path) -> Config:
    return parse_config(Path(path).read_text())
