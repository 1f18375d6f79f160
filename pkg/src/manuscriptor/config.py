"""Run configuration: one JSON document with a section per pipeline.

Loading is strict: unknown keys raise :class:`ConfigError` naming the dotted
key, relative paths resolve against the config file's directory, and the
``MANUSCRIPTOR_SEED`` environment variable overrides the global seed.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .layout import SegmenterConfig, SelfTrainConfig
from .net import NetConfig
from .raster import NoiseParams
from .recognizer import TrainConfig
from .synth import CompositionParams, CorpusParams

SEED_ENV = "MANUSCRIPTOR_SEED"


class ConfigError(ValueError):
    pass


def _path(default=None):
    return field(default=default, metadata={"path": True})


@dataclass
class SynthSection:
    text_files: list = _path(default=None)
    glyph_dir: str | None = _path()
    procedural_glyphs: int = 27
    glyph_variants: int = 1
    out_dir: str | None = _path()
    composition: CompositionParams = field(default_factory=CompositionParams)
    corpus: CorpusParams = field(default_factory=CorpusParams)


@dataclass
class SplitSection:
    color_dir: str | None = _path()
    mask_dir: str | None = _path()
    bbox_dir: str | None = _path()
    binary_dir: str | None = _path()
    out_dir: str | None = _path()
    border_margin: int = 16


@dataclass
class OcrSection:
    manifest: str | None = _path()
    checkpoint: str | None = _path()
    transcripts: str | None = _path()
    decode: str = "greedy"
    beam_width: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.decode not in ("greedy", "beam"):
            raise ConfigError(f"ocr.decode must be 'greedy' or 'beam', got {self.decode!r}")


@dataclass
class LayoutSection:
    labeled_dir: str | None = _path()
    pool_dir: str | None = _path()
    val_dir: str | None = _path()
    test_dir: str | None = _path()
    checkpoint: str | None = _path()
    report: str | None = _path()
    self_train: SelfTrainConfig = field(default_factory=SelfTrainConfig)


@dataclass
class MetricsSection:
    ratio_mode: str = "max"

    def __post_init__(self):
        if self.ratio_mode not in ("max", "indel"):
            raise ConfigError(f"metrics.ratio_mode must be 'max' or 'indel', got {self.ratio_mode!r}")


@dataclass
class RunConfig:
    seed: int | None = None
    synth: SynthSection = field(default_factory=SynthSection)
    split: SplitSection = field(default_factory=SplitSection)
    ocr: OcrSection = field(default_factory=OcrSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def effective_seed(self) -> int:
        return 42 if self.seed is None else self.seed

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Short SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_json(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# nested dataclass types that may appear as plain dicts in the JSON
_NESTED = {
    (SynthSection, "composition"): CompositionParams,
    (SynthSection, "corpus"): CorpusParams,
    (CompositionParams, "noise"): NoiseParams,
    (OcrSection, "train"): TrainConfig,
    (TrainConfig, "net"): NetConfig,
    (LayoutSection, "self_train"): SelfTrainConfig,
    (SelfTrainConfig, "model"): SegmenterConfig,
    (RunConfig, "synth"): SynthSection,
    (RunConfig, "split"): SplitSection,
    (RunConfig, "ocr"): OcrSection,
    (RunConfig, "layout"): LayoutSection,
    (RunConfig, "metrics"): MetricsSection,
}


def build(cls, data: Any, prefix: str = "", base: Path | None = None):
    """Instantiate dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown config key {dotted!r}")
        f = known[key]
        nested = _NESTED.get((cls, key))
        if nested is not None:
            value = build(nested, value, dotted, base)
        elif f.metadata.get("path") and value is not None:
            value = _resolve(value, base)
        elif isinstance(value, list) and isinstance(f.default, tuple):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _resolve(value, base: Path | None):
    if isinstance(value, (list, tuple)):
        return [_resolve(v, base) for v in value]
    p = Path(value)
    if base is not None and not p.is_absolute():
        p = base / p
    return str(p)


def apply_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Propagate one seed into every section that carries its own."""
    cfg.seed = seed
    cfg.ocr.train.seed = seed
    cfg.ocr.train.net.seed = seed
    cfg.layout.self_train.seed = seed
    cfg.layout.self_train.model.seed = seed
    return cfg


def load_config(path=None, env=None) -> RunConfig:
    """Read ``path`` (or defaults when None) and apply the seed override."""
    env = os.environ if env is None else env
    if path is None:
        cfg = RunConfig()
    else:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = build(RunConfig, data, base=path.resolve().parent)
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if cfg.seed is not None:
        apply_seed(cfg, cfg.seed)
    return cfg


def repro_header(cfg: RunConfig, command: str) -> str:
    return (f"manuscriptor {__version__} command={command} "
            f"config={cfg.digest()} seed={cfg.effective_seed()}")
