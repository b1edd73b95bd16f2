# Copyright (c) 2025, Crowd Hat Contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Pipeline configuration.

One dataclass per concern, assembled into PipelineConfig. On disk the config
is an INI file with one [section] per concern; on the command line any value
can be overridden as `--set section.key=value`.
"""

import configparser
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

from compress import CompressionConfig
from core import ConfigError
from metrics import MatchCriterion
from net import TRAIN_MODES, HatArchitecture
from synth import SynthConfig

logger = logging.getLogger("CrowdHat.config")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-5
    lam: float = 1.0
    seed: int = 7
    mode: str = "joint"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.lam < 0:
            raise ConfigError(f"invalid training config {self}")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"train.mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        return self


@dataclass
class NmsConfig:
    step: float = 0.01
    conf_floor: float = 0.3
    criterion: str = "distance"
    sigma_dist: Optional[float] = None
    iou_thresh: float = 0.5
    baseline_grid: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def validate(self) -> "NmsConfig":
        if not (0.0 < self.step <= 1.0):
            raise ConfigError(f"nms.step must be in (0, 1], got {self.step}")
        if not (0.0 <= self.conf_floor <= 1.0):
            raise ConfigError(f"nms.conf_floor must be in [0, 1], got {self.conf_floor}")
        if not self.baseline_grid or any(not (0.0 <= t <= 1.0) for t in self.baseline_grid):
            raise ConfigError(f"nms.baseline_grid must hold thresholds in [0, 1], got {self.baseline_grid}")
        try:
            self.match_criterion()
        except ValueError as e:
            raise ConfigError(f"invalid match criterion: {e}") from e
        return self

    def match_criterion(self) -> MatchCriterion:
        if self.criterion == "box":
            return MatchCriterion.box(self.iou_thresh)
        return MatchCriterion(self.criterion, sigma_dist=self.sigma_dist)


@dataclass
class PathsConfig:
    workspace: str = "workspace"

    def path(self, *parts: str) -> str:
        return os.path.join(self.workspace, *parts)

    @property
    def scenes(self) -> str:
        return self.path("scenes.jsonl")

    @property
    def features(self) -> str:
        return self.path("features")

    @property
    def samples(self) -> str:
        return self.path("samples")

    @property
    def model(self) -> str:
        return self.path("model.pt")

    @property
    def loss_curve(self) -> str:
        return self.path("loss_curve.csv")

    @property
    def predictions(self) -> str:
        return self.path("predictions.jsonl")

    @property
    def metrics(self) -> str:
        return self.path("metrics.csv")

    @property
    def summary(self) -> str:
        return self.path("summary.json")

    @property
    def resolved_config(self) -> str:
        return self.path("config.ini")

    def validate(self) -> "PathsConfig":
        if not self.workspace:
            raise ConfigError("paths.workspace must be set")
        return self


# [arch] does not carry C, S and L: they always follow [compression]
_DERIVED_ARCH_FIELDS = ("C", "S", "L")

SECTIONS = {
    "synth": SynthConfig,
    "compression": CompressionConfig,
    "arch": HatArchitecture,
    "train": TrainConfig,
    "nms": NmsConfig,
    "paths": PathsConfig,
}


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    compression: CompressionConfig = field(default_factory=CompressionConfig)
    arch: HatArchitecture = field(default_factory=HatArchitecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "PipelineConfig":
        self.arch.C = self.compression.channels
        self.arch.S = self.compression.S
        self.arch.L = self.compression.L
        for name in SECTIONS:
            getattr(self, name).validate()
        return self

    def set(self, dotted: str, value: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key '{dotted}', expected <section>.<key> "
                              f"with section in {sorted(SECTIONS)}")
        target = getattr(self, section)
        hints = typing.get_type_hints(type(target))
        if key not in hints or (section == "arch" and key in _DERIVED_ARCH_FIELDS):
            raise ConfigError(f"unknown config key '{dotted}'")
        setattr(target, key, _coerce(value, hints[key], dotted))

    def apply_overrides(self, overrides: Iterable[str]) -> "PipelineConfig":
        for item in overrides or ():
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override '{item}' must look like section.key=value")
            self.set(key.strip(), value.strip())
        return self

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                if name == "arch" and f.name in _DERIVED_ARCH_FIELDS:
                    continue
                lines.append(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ini())

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = ()) -> "PipelineConfig":
        """
        Defaults, then the INI file (if any), then `section.key=value` overrides.

        Raises:
            ConfigError: On unknown keys, unparsable values or failed validation
        """
        config = cls()
        if path:
            parser = configparser.ConfigParser()
            parser.optionxform = str
            if not parser.read(path, encoding="utf-8"):
                raise ConfigError(f"cannot read config file {path}")
            logger.debug(f"Loaded config sections {parser.sections()} from {path}")
            for section in parser.sections():
                for key, value in parser[section].items():
                    config.set(f"{section}.{key}", value)
        config.apply_overrides(overrides)
        return config.validate()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union and type(None) in args:
            if raw.strip().lower() in ("none", "null", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _coerce(raw, inner, key)
        if origin in (tuple, Tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(s, args[0], key) for s in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(_coerce(s, a, key) for s, a in zip(items, args))
        if hint is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for '{key}': {e}") from e
