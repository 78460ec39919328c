"""Run configuration: a flat, typed TOML document with a schema version key."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .training import TrainRunConfig
from .unet import UNetConfig

SCHEMA_VERSION = 1
_PATH_KEYS = ("train_manifest", "val_manifest", "test_manifest", "output_dir")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    # data
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    output_dir: str = "runs"
    # network
    depth: int = 3
    base_channels: int = 16
    encoder_kind: str = "plain"
    input_size: int = 64
    decoder_batchnorm: bool = True
    # training
    max_epochs: int = 50
    batch_size: int = 4
    initial_lr: float = 1e-4
    checkpoint_every: int = 0
    early_stop: bool = False
    early_stop_patience: int = 10
    patience: int = 4
    decay_factor: float = 0.1
    min_lr: float = 1e-7
    threshold: float = 1e-4
    # slice / scan rule
    pixel_threshold: float = 0.5
    min_area: int = 0  # 0 = scale 50 px at 512² to the input size
    K: int = 15
    # randomness
    seed: int = 0

    def unet(self) -> UNetConfig:
        return UNetConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            encoder_kind=self.encoder_kind,
            input_size=self.input_size,
            decoder_batchnorm=self.decoder_batchnorm,
        )

    def train_run(self) -> TrainRunConfig:
        names = {f.name for f in fields(TrainRunConfig)}
        return TrainRunConfig(**{k: getattr(self, k) for k in names})

    def with_overrides(self, **kw) -> "RunConfig":
        return coerce(replace(self, **{k: v for k, v in kw.items() if v is not None}))


def coerce(cfg: RunConfig) -> RunConfig:
    """Type-check every field against its default's type."""
    vals = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        default = f.default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected true/false, got {v!r}")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{f.name}: expected integer, got {v!r}")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{f.name}: expected number, got {v!r}")
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{f.name}: expected string, got {v!r}")
        vals[f.name] = v
    out = RunConfig(**vals)
    if out.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {out.schema_version} is not supported (expected {SCHEMA_VERSION})")
    return out


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s): {', '.join(unknown)}")
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat, found table(s): {', '.join(nested)}")
    base = os.path.dirname(os.path.abspath(path))
    for key in _PATH_KEYS:
        if doc.get(key) and isinstance(doc[key], str) and not os.path.isabs(doc[key]):
            doc[key] = os.path.join(base, doc[key])
    return coerce(RunConfig(**doc))


def dump_config(cfg: RunConfig) -> str:
    """TOML text for ``cfg`` (every key, in declaration order)."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            lines.append(f"{f.name} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f"{f.name} = {json.dumps(v)}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"
