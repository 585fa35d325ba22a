"""Pipeline configuration: one serialisable document for every stage."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .errors import BadConfig
from .models.generator import GeneratorConfig
from .rdm import FitOptions
from .training import TrainConfig


@dataclass
class BackboneConfig:
    name: str = "efficientnet_b3"
    # "torchvision", a state-dict path, "random" (seeded from the pipeline seed) or
    # "auto" (pretrained when retrievable, else "random" with a warning)
    weights: str = "auto"
    input_size: int = 512


@dataclass
class AnalysisConfig:
    patches: str | None = None  # directory of reference patches, one image per patch
    layers: list[int] | None = None  # default: every tap
    top_k: int = 2
    fit: FitOptions = field(default_factory=FitOptions)
    preset: str = "medium"


@dataclass
class DataConfig:
    src: str | None = None  # directory of clips (frame directories, videos or .npy arrays)
    patch_size: int = 512
    patch_stride: int = 512
    frame_step: int = 1
    test_fraction: float = 0.0
    flow_backend: str = "dis"
    lpips_weights: str = "auto"
    preset: str = "medium"
    keyint: int = 30
    max_psnr_y: float | None = 38.0  # training entries above this PSNR_Y are dropped
    limit: int | None = None  # cap on training samples, for smoke runs


@dataclass
class EvalConfig:
    metrics: list[str] = field(default_factory=lambda: ["psnr", "ssim", "lpips", "fid", "kid"])
    manifest: str | None = None  # default: the run's test manifest, else its train manifest
    checkpoints: list[str] = field(default_factory=list)  # default: the run's trained generators
    baselines: bool = True  # add identity and degraded rows
    d_t: float | None = None  # default: the manifest's measured value
    fid_weights: str = "auto"
    batch_size: int = 8


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "run"
    crf_grid: list[int] = field(default_factory=lambda: [22, 26, 30, 34, 38, 42])
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambda_grid: list[float] | None = None  # adversarial runs, one per value, from shared pretraining
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path

    @classmethod
    def from_dict(cls, doc: dict | None) -> "PipelineConfig":
        return _build(cls, doc or {}, "")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise BadConfig(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text()) if path.suffix == ".json" else yaml.safe_load(path.read_text())
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise BadConfig(f"cannot parse {path}: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise BadConfig(f"{path} must hold a mapping at top level")
        return cls.from_dict(doc)

    def override(self, dotted: str, value: Any) -> "PipelineConfig":
        """Copy with one field replaced; `dotted` is e.g. ``train.lambda_mse``."""
        doc = self.to_dict()
        node = doc
        *parents, leaf = dotted.split(".")
        for key in parents:
            if not isinstance(node.get(key), dict):
                raise BadConfig(f"unknown config section {dotted!r}")
            node = node[key]
        if leaf not in node:
            raise BadConfig(f"unknown config field {dotted!r}")
        node[leaf] = value
        return PipelineConfig.from_dict(doc)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise BadConfig(f"{prefix or 'config'} must be a mapping")
    hints = get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise BadConfig(f"unknown config field(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise BadConfig(f"invalid {prefix.rstrip('.') or 'config'}: {exc}") from exc


def parse_value(text: str) -> Any:
    """Parse a command-line override value with YAML scalar rules."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise BadConfig(f"cannot parse value {text!r}: {exc}") from exc
