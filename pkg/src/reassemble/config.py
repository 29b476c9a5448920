"""Run configuration.

Config files are INI-style: any section, flat keys named like the
``RunConfig`` fields (dashes or underscores).  Precedence, lowest first:
defaults, config file, ``REASSEMBLE_SEED``, command-line flags.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .features import KINDS as TEXTURE_KINDS
from .selector import MODES

SEED_ENV = "REASSEMBLE_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    # keypoints
    k: int = 20
    selection: str = "fps"
    selector_checkpoint: str | None = None
    selector_epochs: int = 50
    lambda_area: float = 1.0
    lambda_perimeter: float = 1.0
    # texture
    texture: str = "builtin-cnn"
    embedding_width: int = 64
    patch_size: int = 32
    # denoiser
    T: int = 1000
    steps: int = 50
    layers: int = 6
    heads: int = 4
    width: int = 128
    time_width: int = 64
    # training
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    # paths
    train_dir: str | None = None
    test_dir: str | None = None
    checkpoint: str | None = None
    init_from: str | None = None
    out_dir: str | None = None

    def check(self) -> "RunConfig":
        if self.k < 3:
            raise ValueError(f"k must be >= 3, got {self.k}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.selection not in MODES:
            raise ValueError(f"selection must be one of {MODES}")
        if self.steps < 1 or self.steps > self.T:
            raise ValueError(f"steps must be in [1, T={self.T}]")
        if self.texture not in TEXTURE_KINDS:
            raise ValueError(f"texture must be one of {TEXTURE_KINDS}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError("optimizer must be adam or adamw")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw):
    kind = _FIELDS[name].type
    if raw is None:
        return None
    if isinstance(raw, str) and raw.strip().lower() in ("", "none") and "None" in str(kind):
        return None
    if "int" in str(kind) and "float" not in str(kind):
        return int(raw)
    if "float" in str(kind):
        return float(raw)
    return str(raw)


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            name = key.replace("-", "_")
            if name == "t":  # configparser lowercases keys
                name = "T"
            if name not in _FIELDS:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            out[name] = _coerce(name, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(read_config_file(path))
    if os.environ.get(SEED_ENV):
        values["seed"] = int(os.environ[SEED_ENV])
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = _coerce(name, value)
    return RunConfig(**values).check()


def write_config_file(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {k: "none" if v is None else str(v) for k, v in cfg.to_dict().items()}
    with open(Path(path), "w") as fh:
        parser.write(fh)
