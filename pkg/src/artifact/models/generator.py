"""UNet restoration generator with I-frame features, CBAM and d_t conditioning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from ..errors import BadConfig, ShapeMismatch


@dataclass
class GeneratorConfig:
    unet_depth: int = 4
    base_channels: int = 64
    max_channels: int = 512
    iframe_channels: int | None = None  # default: half the bottleneck width
    motion_channels: int = 2
    residual: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.unet_depth < 2:
            raise BadConfig(f"unet_depth must be at least 2, got {self.unet_depth}")
        if self.base_channels < 1 or self.max_channels < self.base_channels:
            raise BadConfig("channel widths must satisfy 1 <= base_channels <= max_channels")
        if self.iframe_channels is not None and self.iframe_channels < 1:
            raise BadConfig("iframe_channels must be positive")

    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.unet_depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.LeakyReLU(0.2),
        )


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, channels, 1))

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        return x * torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x):
        return self.spatial(self.channel(x))


class IFrameEncoder(nn.Module):
    """Strided CNN block mapping the I-frame patch to bottleneck resolution."""

    def __init__(self, depth: int, widths: list[int], out_channels: int):
        super().__init__()
        layers = []
        cin = 3
        for i in range(depth):
            cout = out_channels if i == depth - 1 else widths[i]
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _with_d(x: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, d.view(-1, 1, 1, 1).expand(-1, 1, *x.shape[-2:])], dim=1)


class GeneratorNetwork(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        config = config or GeneratorConfig()
        config.validate()
        self.config = config
        w = config.widths()
        depth = config.unet_depth
        self.unet_depth = depth
        self.base_channels = config.base_channels
        iframe_ch = config.iframe_channels or max(w[depth] // 2, 1)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            cin = 3 + config.motion_channels
            self.encoders = nn.ModuleList()
            for i in range(depth):
                self.encoders.append(ConvBlock(cin + 1, w[i]))
                cin = w[i]
            self.pool = nn.MaxPool2d(2)
            self.bottleneck = ConvBlock(w[depth - 1] + 1, w[depth])
            self.iframe = IFrameEncoder(depth, w, iframe_ch)
            self.attention = CBAM(w[depth] + iframe_ch)
            self.fuse = nn.Conv2d(w[depth] + iframe_ch, w[depth], 1)
            self.ups = nn.ModuleList()
            self.decoders = nn.ModuleList()
            cin = w[depth]
            for i in reversed(range(depth)):
                self.ups.append(nn.ConvTranspose2d(cin, w[i], 2, stride=2))
                self.decoders.append(ConvBlock(2 * w[i] + 1, w[i]))
                cin = w[i]
            self.head = nn.Conv2d(w[0], 3, 1)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def gate_iframe(self, features: torch.Tensor, delta_t: torch.Tensor) -> torch.Tensor:
        return features * delta_t.view(-1, 1, 1, 1)

    def forward(self, f_t, m_t, i_patch, delta_t, d_t):
        b, _, h, w = f_t.shape
        if m_t.shape != (b, self.config.motion_channels, h, w) or i_patch.shape != (b, 3, h, w):
            raise ShapeMismatch(
                f"inconsistent inputs: f_t {tuple(f_t.shape)}, m_t {tuple(m_t.shape)}, i_patch {tuple(i_patch.shape)}"
            )
        if h % 2**self.unet_depth or w % 2**self.unet_depth:
            raise ShapeMismatch(f"spatial size {h}x{w} not divisible by {2**self.unet_depth}")
        delta_t = torch.as_tensor(delta_t, dtype=f_t.dtype).reshape(-1).expand(b)
        d_t = torch.as_tensor(d_t, dtype=f_t.dtype).reshape(-1).expand(b)

        x = torch.cat([f_t, m_t], dim=1)
        skips = []
        for enc in self.encoders:
            x = enc(_with_d(x, d_t))
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(_with_d(x, d_t))
        gated = self.gate_iframe(self.iframe(i_patch), delta_t)
        x = self.fuse(self.attention(torch.cat([x, gated], dim=1)))
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = dec(_with_d(torch.cat([up(x), skip], dim=1), d_t))
        out = self.head(x)
        return out + f_t if self.config.residual else out


def build_generator(config: GeneratorConfig | dict | None = None) -> GeneratorNetwork:
    if isinstance(config, dict):
        config = GeneratorConfig(**config)
    return GeneratorNetwork(config)


def generator_forward(gen: GeneratorNetwork, f_t, m_t, i_patch, delta_t, d_t) -> torch.Tensor:
    """Inference on a batch; out-of-range conditioning is rejected."""
    delta = torch.as_tensor(delta_t, dtype=torch.float32)
    d = torch.as_tensor(d_t, dtype=torch.float32)
    if torch.any(delta < 0) or torch.any(delta > 1):
        raise ValueError("delta_t must lie in [0, 1]")
    if torch.any(d < 0):
        raise ValueError("d_t must be non-negative")
    with torch.no_grad():
        return gen(f_t, m_t, i_patch, delta, d)
