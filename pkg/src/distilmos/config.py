"""Run configuration read from an INI-style file.

Example::

    [backend]
    name = synthetic
    n_layers = 4
    dim = 32
    seed = 0

    [tokenizer]
    k = 200
    batch_size = 64

    [model]
    hidden_dim = 256

    [training]
    steps = 10000

    [paths]
    manifest = data/manifest.txt
    codebooks = run/codebooks.dmkm
    run_dir = run

Any omitted key keeps its default; defaults are the full-scale settings
(k=200, k-means batch 64, hidden 256, AdamW lr 1e-4, ...). Relative paths
are resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .ssl_backend import BackendSpec
from .trainer import TrainingConfig


@dataclasses.dataclass
class TokenizerParams:
    k: int = 200
    batch_size: int = 64
    seed: int = 0


@dataclasses.dataclass
class Paths:
    manifest: str = "manifest.txt"
    codebooks: str = "codebooks.dmkm"
    run_dir: str = "run"


@dataclasses.dataclass
class RunConfig:
    backend: BackendSpec
    backend_seed: int
    tokenizer: TokenizerParams
    model: ModelConfig
    training: TrainingConfig
    paths: Paths

    def as_dict(self):
        return {
            "backend": {**dataclasses.asdict(self.backend), "seed": self.backend_seed},
            "tokenizer": dataclasses.asdict(self.tokenizer),
            "model": dataclasses.asdict(self.model),
            "training": dataclasses.asdict(self.training),
            "paths": dataclasses.asdict(self.paths),
        }

    def to_ini(self):
        parser = configparser.ConfigParser()
        for section, values in self.as_dict().items():
            parser[section] = {k: _render(v) for k, v in values.items()}
        return parser


def _render(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(","))
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _fill(cls, section, parser, base=None, skip=()):
    values = dict(base or {})
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    if parser.has_section(section):
        for key, raw in parser[section].items():
            if key in skip:
                continue
            if key not in defaults and key not in values:
                raise ConfigError(f"unknown key [{section}] {key}")
            ref = defaults.get(key, values.get(key))
            values[key] = _coerce(raw, ref, f"[{section}] {key}")
    return values


def load_run_config(path=None, overrides=None):
    """Parse a run config; ``overrides`` is ``{section: {key: value}}``."""
    parser = configparser.ConfigParser()
    root = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
        root = path.parent
    for section, values in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in values.items():
            if v is not None:
                parser[section][k] = _render(v)

    backend_values = _fill(BackendSpec, "backend", parser, skip=("seed",))
    backend_seed = int(parser["backend"].get("seed", 0)) if parser.has_section("backend") else 0
    backend = BackendSpec(**backend_values)
    tokenizer = TokenizerParams(**_fill(TokenizerParams, "tokenizer", parser))
    training = TrainingConfig(**_fill(TrainingConfig, "training", parser))
    model_values = _fill(
        ModelConfig,
        "model",
        parser,
        base={"n_layers": backend.n_layers, "ssl_dim": backend.dim},
        skip=("n_layers", "ssl_dim", "n_clusters", "head_mode"),
    )
    model_values.update(n_clusters=tokenizer.k, head_mode=training.head_mode)
    model = ModelConfig(**model_values)
    paths = Paths(**_fill(Paths, "paths", parser))
    for field in dataclasses.fields(paths):
        value = Path(getattr(paths, field.name))
        setattr(paths, field.name, str(value if value.is_absolute() else root / value))
    return RunConfig(backend, backend_seed, tokenizer, model, training, paths)


def write_run_config(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        config.to_ini().write(fh)
    return path


def dump_json(config):
    return json.dumps(config.as_dict(), indent=2, sort_keys=True)
