"""Frozen classification backbones with intermediate-layer taps.

A tap is the output of one of the backbone's top-level stages. For the
EfficientNet family these are the seven mobile-inverted-bottleneck stages,
with the stem convolution folded into stage 0.
"""

from __future__ import annotations

import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torchvision

from .errors import BadPatchShape, UnknownBackbone, UnknownLayerIndex, WeightLoadError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DEFAULT_WEIGHTS = "torchvision"
FEATURE_MAGIC = b"FEAT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    index: int
    channels: int
    downsample_factor: int


@dataclass
class FeatureSet:
    patch_id: str
    features: dict[int, np.ndarray] = field(default_factory=dict)

    def total_elements(self) -> int:
        return sum(int(a.size) for a in self.features.values())

    def flattened(self, z: int) -> np.ndarray:
        return self.features[z].reshape(-1)


def _efficientnet(builder, weights_enum):
    def make():
        net = builder(weights=None)
        # stem + stage0 ... stage6; the final 1x1 head conv is not a tap
        stages = [nn.Sequential(net.features[0], net.features[1])]
        stages += [net.features[i] for i in range(2, 8)]
        return nn.ModuleList(stages)

    return make, weights_enum


_REGISTRY: dict[str, tuple[Callable[[], nn.ModuleList], object]] = {
    "efficientnet_b3": _efficientnet(
        torchvision.models.efficientnet_b3, torchvision.models.EfficientNet_B3_Weights.IMAGENET1K_V1
    ),
    "efficientnet_b0": _efficientnet(
        torchvision.models.efficientnet_b0, torchvision.models.EfficientNet_B0_Weights.IMAGENET1K_V1
    ),
}


def available_backbones() -> list[str]:
    return sorted(_REGISTRY)


def _stage_state_dict(full: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Map a torchvision EfficientNet state dict onto the tap-stage layout."""
    out = {}
    for key, value in full.items():
        parts = key.split(".")
        if parts[0] != "features":
            continue
        idx = int(parts[1])
        rest = ".".join(parts[2:])
        if idx == 0:
            out[f"0.0.{rest}"] = value
        elif idx == 1:
            out[f"0.1.{rest}"] = value
        elif idx <= 7:
            out[f"{idx - 1}.{rest}"] = value
    return out


def _read_weights(source: str, weights_enum) -> dict[str, torch.Tensor]:
    if source == DEFAULT_WEIGHTS:
        try:
            state = weights_enum.get_state_dict(progress=False, check_hash=True)
        except Exception as exc:  # network, hash or unpickling errors
            raise WeightLoadError(
                f"could not retrieve pretrained weights {weights_enum}: {exc}. "
                "Place the checkpoint in the torch hub cache or pass a local file."
            ) from exc
        return _stage_state_dict(state)
    path = Path(source)
    if not path.is_file():
        raise WeightLoadError(f"weights file not found: {source}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise WeightLoadError(f"unreadable weights file {source}: {exc}") from exc
    if not isinstance(state, Mapping):
        raise WeightLoadError(f"{source} does not hold a state dict")
    if any(k.startswith("features.") for k in state):
        state = _stage_state_dict(state)
    return dict(state)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class Backbone(nn.Module):
    """Frozen feature network. Inputs are RGB in [0, 1], NCHW."""

    def __init__(self, name: str, stages: nn.ModuleList, input_size: int = 512):
        super().__init__()
        self.name = name
        self.input_size = int(input_size)
        self.stages = stages
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        # incremented once per stage execution; lets callers verify truncation
        self.stage_calls: Counter[int] = Counter()
        self.layers = self._probe_layers()
        self.weights_checksum = parameter_checksum(self)

    def train(self, mode: bool = True):
        # batch-norm statistics never update
        return super().train(False)

    @torch.no_grad()
    def _probe_layers(self) -> list[LayerSpec]:
        size = 64
        h = torch.zeros(1, 3, size, size)
        specs = []
        for i, stage in enumerate(self.stages):
            h = stage(h)
            specs.append(LayerSpec(index=i, channels=int(h.shape[1]), downsample_factor=size // int(h.shape[-1])))
        return specs

    @property
    def num_layers(self) -> int:
        return len(self.stages)

    def forward_taps(self, x: torch.Tensor, indices: Iterable[int]) -> dict[int, torch.Tensor]:
        """Run stages up to the deepest requested tap and return the tapped outputs.

        Gradients flow to `x` (needed for gradient penalties); parameters stay frozen.
        """
        wanted = sorted(set(int(i) for i in indices))
        for z in wanted:
            if not 0 <= z < self.num_layers:
                raise UnknownLayerIndex(z)
        out: dict[int, torch.Tensor] = {}
        if not wanted:
            return out
        h = (x - self.mean) / self.std
        for i in range(wanted[-1] + 1):
            h = self.stages[i](h)
            self.stage_calls[i] += 1
            if i in wanted:
                out[i] = h
        return out


def load_backbone(name: str = "efficientnet_b3", weights_source: str = DEFAULT_WEIGHTS, input_size: int = 512) -> Backbone:
    """Build a registered backbone and load its weights.

    `weights_source` is ``"torchvision"`` (pretrained ImageNet weights via the
    torch hub cache), a path to a state-dict file, or ``"random:<seed>"`` for a
    seeded, untrained initialisation used in offline smoke runs.
    """
    if name not in _REGISTRY:
        raise UnknownBackbone(name)
    make, weights_enum = _REGISTRY[name]
    if weights_source.startswith("random:"):
        seed = int(weights_source.split(":", 1)[1])
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            stages = make()
    else:
        stages = make()
        state = _read_weights(weights_source, weights_enum)
        try:
            stages.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise WeightLoadError(f"weights do not match {name}: {exc}") from exc
    return Backbone(name, stages, input_size=input_size)


def list_layers(backbone: Backbone) -> list[LayerSpec]:
    return list(backbone.layers)


def patch_to_tensor(patch: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 or float-in-[0,1] array -> 1x3xHxW float tensor."""
    arr = np.asarray(patch)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise BadPatchShape(f"expected HxWx3 patch, got {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


@torch.no_grad()
def extract_features(backbone: Backbone, patch: np.ndarray, layer_indices: Iterable[int], patch_id: str = "") -> FeatureSet:
    """Tap outputs for one patch, returned as HxWxC float32 arrays."""
    arr = np.asarray(patch)
    expected = (backbone.input_size, backbone.input_size, 3)
    if arr.shape != expected:
        raise BadPatchShape(f"expected patch of shape {expected}, got {arr.shape}")
    indices = sorted(set(int(i) for i in layer_indices))
    taps = backbone.forward_taps(patch_to_tensor(arr), indices)
    feats = {z: taps[z][0].permute(1, 2, 0).contiguous().numpy().astype(np.float32) for z in indices}
    return FeatureSet(patch_id=patch_id, features=feats)


def feature_filename(patch_id: str, crf: int | str) -> str:
    return f"{patch_id}_crf{crf}.feat"


def save_features(path: str | Path, fs: FeatureSet) -> None:
    """Container: magic, version, count, then per layer (index, ndim, dims, <f4 data)."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", FEATURE_VERSION, len(fs.features)))
        for z in sorted(fs.features):
            arr = np.ascontiguousarray(fs.features[z], dtype="<f4")
            fh.write(struct.pack("<iI", z, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_features(path: str | Path, patch_id: str | None = None) -> FeatureSet:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != FEATURE_MAGIC:
            raise ValueError(f"{path} is not a feature dump")
        version, count = struct.unpack("<II", fh.read(8))
        if version != FEATURE_VERSION:
            raise ValueError(f"unsupported feature dump version {version}")
        feats = {}
        for _ in range(count):
            z, ndim = struct.unpack("<iI", fh.read(8))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape))
            feats[z] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if patch_id is None:
        patch_id = path.name.rsplit("_crf", 1)[0]
    return FeatureSet(patch_id=patch_id, features=feats)
