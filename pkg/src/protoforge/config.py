"""Run configuration: flat ``section.key=value`` files merged with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .core import ConfigError
from .data import SyntheticSpec
from .encoder import EncoderConfig
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "PROTOFORGE_SEED"


@dataclass
class DataConfig:
    train: Optional[str] = None
    train_relations: Optional[str] = None  # "start:stop" slice over sorted relation ids
    val: Optional[str] = None
    val_relations: Optional[str] = None
    names: Optional[str] = None
    embeddings: Optional[str] = None
    T: int = 40
    max_rel: Optional[int] = None


@dataclass
class OutputConfig:
    checkpoint: str = "model.ckpt"
    log: Optional[str] = None  # defaults to <checkpoint>.log


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: OutputConfig = field(default_factory=OutputConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0

    def sections(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self) if is_dataclass(getattr(self, f.name))}

    def finalize(self) -> "RunConfig":
        """Propagate shared values (seed, encoder) and validate."""
        self.model.encoder = self.encoder
        self.model.seed = self.seed
        self.train.seed = self.seed
        self.synth.seed = self.seed
        self.model.validate()
        self.train.validate()
        self.loss.validate()
        return self

    def items(self) -> List[Tuple[str, object]]:
        out = [("seed", self.seed)]
        for sec, obj in self.sections().items():
            for f in fields(obj):
                if is_dataclass(getattr(obj, f.name)):
                    continue  # model.encoder is the encoder section
                out.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        return out

    def dump(self) -> str:
        return "\n".join(f"{k}={_format(v)}" for k, v in self.items())


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, annotation: str, raw: str):
    raw = raw.strip()
    optional = "Optional" in annotation or "None" in annotation
    if optional and raw.lower() in ("none", "null", ""):
        return None
    base = annotation.replace("Optional[", "").rstrip("]")
    try:
        if base == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None
    return raw


def set_value(cfg: RunConfig, key: str, raw: str) -> None:
    if key == "seed":
        cfg.seed = _coerce(key, "int", raw)
        return
    sec, _, name = key.partition(".")
    target = cfg.sections().get(sec)
    if target is None or not name:
        raise ConfigError(f"unknown config key {key!r}")
    ann = {f.name: str(f.type) for f in fields(target)}
    if name not in ann or is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(key, ann[name], raw))


def parse_lines(lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, str]]:
    pairs = []
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path: Optional[str] = None, overrides: Iterable[Tuple[str, str]] = (),
                env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then $PROTOFORGE_SEED, then the file, then overrides (last wins)."""
    env = os.environ if env is None else env
    cfg = RunConfig()
    if env.get(SEED_ENV):
        set_value(cfg, "seed", env[SEED_ENV])
    pairs: List[Tuple[str, str]] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs += parse_lines(p.read_text().splitlines(), str(path))
    pairs += list(overrides)
    for k, v in pairs:
        set_value(cfg, k, v)
    return cfg.finalize()
