"""PatchGAN-style critic fed by selected frozen-backbone taps.

Each selected tap goes through its own CNN block down (or up) to a common
grid at 1/16 of the input resolution; a direct path processes the raw patch
to the same grid. The branches are concatenated and reduced to a single
channel score block with no output activation.

For a 512x512 patch the common grid is 32x32 and the score block 30x30;
for 128x128 it is 8x8 and 6x6.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import BackboneRequired, BadPatchShape
from ..features import Backbone

GRID_FACTOR = 16
DIRECT_WIDTHS = (64, 128, 256, 512)
TAP_WIDTHS = (64, 128, 256)

_KIND_LAYERS = {"opt": (0, 3), "layers_5_6": (5, 6), "trainable_only": ()}


@dataclass(frozen=True)
class CriticVariant:
    kind: str
    layers: tuple[int, ...]

    @classmethod
    def from_kind(cls, kind: str, selection=None) -> "CriticVariant":
        if kind not in _KIND_LAYERS:
            raise ValueError(f"unknown critic variant {kind!r}; expected one of {sorted(_KIND_LAYERS)}")
        layers = _KIND_LAYERS[kind]
        if kind == "opt" and selection is not None:
            layers = tuple(sorted(selection.selected))
        return cls(kind, tuple(layers))

    @property
    def needs_backbone(self) -> bool:
        return bool(self.layers)


def down_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


def same_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size=3, stride=1, padding=1),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(0.2),
    )


def tap_branch(channels: int, downsample_factor: int) -> tuple[nn.Sequential, int]:
    """CNN block taking a tap at 1/downsample_factor to the 1/16 grid."""
    layers: list[nn.Module] = []
    if downsample_factor < GRID_FACTOR:
        n = int(round(math.log2(GRID_FACTOR / downsample_factor)))
        widths = TAP_WIDTHS[-n:] if n <= len(TAP_WIDTHS) else (TAP_WIDTHS[0],) * (n - len(TAP_WIDTHS)) + TAP_WIDTHS
        cin = channels
        for w in widths:
            layers.append(down_block(cin, w))
            cin = w
    else:
        if downsample_factor > GRID_FACTOR:
            layers.append(nn.Upsample(scale_factor=downsample_factor // GRID_FACTOR, mode="bilinear", align_corners=False))
        layers.append(same_block(channels, TAP_WIDTHS[-1]))
    return nn.Sequential(*layers), TAP_WIDTHS[-1]


class CriticNetwork(nn.Module):
    def __init__(self, variant: CriticVariant, backbone: Backbone | None = None, patch_size: int = 512, seed: int = 0):
        super().__init__()
        if variant.needs_backbone and backbone is None:
            raise BackboneRequired(f"critic variant {variant.kind} needs a backbone")
        if patch_size % 32:
            raise BadPatchShape(f"patch size must be a multiple of 32, got {patch_size}")
        self.variant = variant
        self.patch_size = patch_size
        self.seed = seed
        # kept outside the module tree: never trained, never checkpointed with the critic
        self.__dict__["backbone"] = backbone if variant.needs_backbone else None

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build(backbone)

    def _build(self, backbone):
        variant = self.variant
        specs = {s.index: s for s in backbone.layers} if self.backbone is not None else {}
        branches = {}
        fused = 0
        for z in variant.layers:
            branch, width = tap_branch(specs[z].channels, specs[z].downsample_factor)
            branches[str(z)] = branch
            fused += width
        self.taps = nn.ModuleDict(branches)

        direct = []
        cin = 3
        for w in DIRECT_WIDTHS:
            direct.append(down_block(cin, w))
            cin = w
        self.direct = nn.Sequential(*direct)
        fused += DIRECT_WIDTHS[-1]

        self.head = nn.Sequential(
            nn.Conv2d(fused, 512, kernel_size=4, stride=1, padding=1),
            nn.InstanceNorm2d(512, affine=True),
            nn.LeakyReLU(0.2),
        )
        self.final = nn.Conv2d(512, 1, kernel_size=4, stride=1, padding=1)

    def config_dict(self) -> dict:
        return {"kind": self.variant.kind, "layers": list(self.variant.layers), "patch_size": self.patch_size, "seed": self.seed}

    @property
    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    @property
    def frozen_parameter_count(self) -> int:
        if self.backbone is None:
            return 0
        return sum(p.numel() for p in self.backbone.parameters())

    def score_block_size(self) -> int:
        return self.patch_size // GRID_FACTOR - 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-2:] != (self.patch_size, self.patch_size):
            raise BadPatchShape(f"expected (B, 3, {self.patch_size}, {self.patch_size}), got {tuple(x.shape)}")
        parts = [self.direct(x)]
        if self.backbone is not None:
            taps = self.backbone.forward_taps(x, self.variant.layers)
            parts += [self.taps[str(z)](taps[z]) for z in self.variant.layers]
        return self.final(self.head(torch.cat(parts, dim=1)))


def build_critic(
    variant: CriticVariant | str,
    selection=None,
    backbone: Backbone | None = None,
    patch_size: int = 512,
    seed: int = 0,
) -> CriticNetwork:
    """Critic for a variant; an "opt" critic takes its taps from `selection` when given."""
    if isinstance(variant, str):
        variant = CriticVariant.from_kind(variant, selection)
    elif selection is not None and variant.kind == "opt":
        variant = CriticVariant("opt", tuple(sorted(selection.selected)))
    return CriticNetwork(variant, backbone, patch_size, seed)


def critic_scalar(block: torch.Tensor) -> torch.Tensor:
    """Per-sample critic value: mean over the score block."""
    return block.reshape(block.shape[0], -1).mean(dim=1)


@torch.no_grad()
def critic_forward(critic: CriticNetwork, patch) -> torch.Tensor:
    """Score block for one HxWx3 patch (or a 1x3xHxW tensor) in eval mode."""
    from ..features import patch_to_tensor

    x = patch if isinstance(patch, torch.Tensor) else patch_to_tensor(patch)
    was_training = critic.training
    critic.eval()
    try:
        return critic(x)[0]
    finally:
        critic.train(was_training)
