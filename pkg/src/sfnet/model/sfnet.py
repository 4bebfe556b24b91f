"""Dual-domain (spatial + frequency) forgery detection network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from sfnet import spectral
from sfnet.autodiff import Tensor, concat, maxpool2d, pool_global, relu, reshape, sigmoid
from sfnet.model.layers import BatchNorm2d, Conv2d, Linear, Module
from sfnet.spectral import CHANNEL, HighPassSpec

BRANCH_MODES = ("both", "spatial_only", "frequency_only")

VARIANTS = {
    "SFNet": ("both", True),
    "SFNet w/o att": ("both", False),
    "SFNet-Image w/o att": ("spatial_only", False),
    "SFNet-Image with att": ("spatial_only", True),
    "SFNet-Frequency w/o att": ("frequency_only", False),
    "SFNet-Frequency with att": ("frequency_only", True),
}

FREQUENCY_ORDER = ("hfri", "stem", "fcl", "hfrf_channel", "hfrf_spatial")


@dataclass(frozen=True)
class SFNetConfig:
    base_channels: int = 32
    input_extent: int = 64
    branch_mode: str = "both"
    attention_enabled: bool = True
    highpass_scale: float = 4.0
    mlp_reduction_ratio: int = 16
    refine_groups: int = 3
    blocks_per_group: int = 2
    num_classes: int = 2

    def __post_init__(self):
        if self.branch_mode not in BRANCH_MODES:
            raise ValueError(f"branch_mode must be one of {BRANCH_MODES}, got {self.branch_mode!r}")
        if self.base_channels % self.mlp_reduction_ratio:
            raise ValueError(
                f"base_channels {self.base_channels} not divisible by "
                f"mlp_reduction_ratio {self.mlp_reduction_ratio}")
        if not spectral.is_power_of_two(self.input_extent) or self.input_extent < 2:
            raise ValueError(f"input_extent must be a power of two, got {self.input_extent}")
        if self.num_classes != 2:
            raise ValueError("the detector is binary: num_classes must be 2")
        if self.refine_groups < 1 or self.blocks_per_group < 1:
            raise ValueError("refine_groups and blocks_per_group must be >= 1")
        if (self.input_extent // 2) >> self.refine_groups < 1:
            raise ValueError(
                f"{self.refine_groups} refine groups underflow a {self.input_extent}px input")
        HighPassSpec(self.input_extent, self.input_extent, self.highpass_scale)

    @classmethod
    def desk(cls, **overrides) -> "SFNetConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "SFNetConfig":
        return cls(**{"input_extent": 256, **overrides})

    @classmethod
    def variant(cls, name: str, base: Optional["SFNetConfig"] = None) -> "SFNetConfig":
        """Config for one of the six ablation variants in :data:`VARIANTS`."""
        mode, att = VARIANTS[name]
        return replace(base or cls(), branch_mode=mode, attention_enabled=att)

    @property
    def refine_channels(self) -> int:
        return self.base_channels << self.refine_groups

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SFNetConfig":
        return cls(**d)


def _identity_kernel(conv: Conv2d) -> None:
    """Set a same-channel conv to the identity map (used by tests)."""
    k = conv.weight.shape[-1]
    w = np.zeros(conv.weight.shape, dtype=conv.weight.dtype)
    for c in range(w.shape[0]):
        w[c, c, k // 2, k // 2] = 1
    conv.weight.data[...] = w
    if conv.bias is not None:
        conv.bias.data[...] = 0


class ImageExtractor(Module):
    """conv 3x3 -> BN -> ReLU -> maxpool 2: one deliberately shallow layer."""

    def __init__(self, cfg: SFNetConfig, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.conv = Conv2d(in_channels, cfg.base_channels, 3, rng)
        self.bn = BatchNorm2d(cfg.base_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError("input extents must be even")
        return maxpool2d(relu(self.bn(self.conv(x))), 2, 2)


class HFRF(Module):
    """High-pass along the spatial plane (3x3 conv) or the channel axis (1x1 conv)."""

    def __init__(self, channels: int, dim: str, scale: float, rng: np.random.Generator):
        super().__init__()
        if dim not in (spectral.SPATIAL, CHANNEL):
            raise ValueError(f"dim must be 'spatial' or 'channel', got {dim!r}")
        self.dim = dim
        self.scale = scale
        self.conv = Conv2d(channels, channels, 3 if dim == spectral.SPATIAL else 1, rng)

    def spec_for(self, f: Tensor) -> HighPassSpec:
        if self.dim == CHANNEL:
            return HighPassSpec(spectral.next_power_of_two(f.shape[1]), 1, self.scale)
        return HighPassSpec(f.shape[3], f.shape[2], self.scale)

    def filtered(self, f: Tensor) -> Tensor:
        return spectral.high_frequency(f, self.spec_for(f), self.dim)

    def forward(self, f: Tensor) -> Tensor:
        return self.conv(self.filtered(f))


class FCL(Module):
    """Frequency conv layer: separate learnable convs on amplitude and phase.

    ``f~ = FFT(conv1(f))``; amplitude and phase each get a 3x3 conv and are
    recombined as ``A' * exp(i P')``; the result is inverted and mixed by
    ``conv2``. The recombined field is generally not Hermitian, so the
    inverse keeps its real part.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 1, rng)
        self.conv_amplitude = Conv2d(channels, channels, 3, rng)
        self.conv_phase = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 1, rng)

    def forward(self, f: Tensor, diagnostics: Optional[dict] = None) -> Tensor:
        spec = spectral.fft2(self.conv1(f))
        amp, phase = spectral.amp_phase(spec)
        mixed = spectral.recombine(self.conv_amplitude(amp), self.conv_phase(phase))
        return self.conv2(spectral.ifft2(mixed, strict=False, diagnostics=diagnostics))


class FrequencyExtractor(Module):
    """HFRI -> conv stem -> FCL -> HFRF-C -> HFRF-S (order in :data:`FREQUENCY_ORDER`)."""

    def __init__(self, cfg: SFNetConfig, rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        c = cfg.base_channels
        self.scale = cfg.highpass_scale
        self.stem = ImageExtractor(cfg, rng, in_channels)
        self.fcl = FCL(c, rng)
        self.hfrf_channel = HFRF(c, CHANNEL, cfg.highpass_scale, rng)
        self.hfrf_spatial = HFRF(c, spectral.SPATIAL, cfg.highpass_scale, rng)

    def hfri(self, x: Tensor) -> Tensor:
        return spectral.hfri(x, HighPassSpec(x.shape[3], x.shape[2], self.scale))

    def forward(self, x: Tensor) -> Tensor:
        f = self.stem(self.hfri(x))
        f = self.fcl(f)
        f = self.hfrf_channel(f)
        return self.hfrf_spatial(f)


class ProjectionBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv3 = Conv2d(channels, channels, 3, rng)
        self.conv1 = Conv2d(channels, channels, 1, rng)

    def forward(self, f: Tensor) -> Tensor:
        return f + self.conv1(relu(self.conv3(f)))


class ProjectionUnit(Module):
    """Three residual projection blocks mapping a branch into the shared space."""

    def __init__(self, channels: int, rng: np.random.Generator, blocks: int = 3):
        super().__init__()
        self.blocks = [ProjectionBlock(channels, rng) for _ in range(blocks)]

    def forward(self, f: Tensor) -> Tensor:
        for block in self.blocks:
            f = block(f)
        return f


class ChannelAttention(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"{channels} channels not divisible by reduction {reduction}")
        self.channels = channels
        hidden = channels // reduction
        self.fc0 = Linear(channels, hidden, rng, bias=False)
        self.fc1 = Linear(hidden, channels, rng, bias=False)

    def mlp(self, d: Tensor) -> Tensor:
        return self.fc1(relu(self.fc0(d)))

    def forward(self, f: Tensor) -> Tensor:
        n, c = f.shape[:2]
        avg = reshape(pool_global(f, "avg", "spatial"), (n, c))
        mx = reshape(pool_global(f, "max", "spatial"), (n, c))
        return reshape(sigmoid(self.mlp(avg) + self.mlp(mx)), (n, c, 1, 1))


class SpatialAttention(Module):
    def __init__(self, rng: np.random.Generator, kernel_size: int = 7):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, rng, padding=kernel_size // 2, bias=False)

    def forward(self, f: Tensor) -> Tensor:
        desc = concat([pool_global(f, "avg", "channel"), pool_global(f, "max", "channel")], axis=1)
        return sigmoid(self.conv(desc))


class CBAM(Module):
    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction, rng)
        self.spatial = SpatialAttention(rng)

    def forward(self, f: Tensor) -> Tensor:
        f = self.channel(f) * f
        return self.spatial(f) * f


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, padding=0)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None

    def forward(self, f: Tensor) -> Tensor:
        out = self.bn2(self.conv2(relu(self.bn1(self.conv1(f)))))
        short = self.proj_bn(self.proj(f)) if self.proj is not None else f
        return relu(out + short)


class RefineGroup(Module):
    def __init__(self, cin: int, blocks: int, attention: bool, reduction: int,
                 rng: np.random.Generator):
        super().__init__()
        cout = 2 * cin
        self.blocks = [ResidualBlock(cin, cout, 2, rng)]
        self.blocks += [ResidualBlock(cout, cout, 1, rng) for _ in range(blocks - 1)]
        self.cbam = CBAM(cout, reduction, rng) if attention else None

    def forward(self, f: Tensor) -> Tensor:
        for block in self.blocks:
            f = block(f)
        return self.cbam(f) if self.cbam is not None else f


class Refine(Module):
    def __init__(self, cfg: SFNetConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.base_channels
        self.groups = []
        for _ in range(cfg.refine_groups):
            self.groups.append(RefineGroup(c, cfg.blocks_per_group, cfg.attention_enabled,
                                           cfg.mlp_reduction_ratio, rng))
            c *= 2

    def forward(self, f: Tensor, taps: Optional[dict] = None) -> Tensor:
        for i, group in enumerate(self.groups):
            if f.shape[2] < 2 or f.shape[3] < 2:
                raise ValueError(f"refine group {i}: spatial extent {f.shape[2:]} would underflow")
            f = group(f)
            if taps is not None:
                taps[f"refine.{i}"] = f
        return f


class SFNet(Module):
    def __init__(self, cfg: SFNetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        self.image = self.image_proj = self.frequency = self.frequency_proj = None
        if cfg.branch_mode in ("both", "spatial_only"):
            self.image = ImageExtractor(cfg, rng)
            self.image_proj = ProjectionUnit(c, rng)
        if cfg.branch_mode in ("both", "frequency_only"):
            self.frequency = FrequencyExtractor(cfg, rng)
            self.frequency_proj = ProjectionUnit(c, rng)
        self.refine = Refine(cfg, rng)
        self.head = Linear(cfg.refine_channels, cfg.num_classes, rng)

    def branch_features(self, x: Tensor) -> dict:
        feats = {}
        if self.image is not None:
            feats["image"] = self.image(x)
        if self.frequency is not None:
            feats["frequency"] = self.frequency(x)
        return feats

    def forward(self, x: Tensor, taps: Optional[dict] = None) -> Tensor:
        ext = self.cfg.input_extent
        if x.ndim != 4 or x.shape[1:] != (3, ext, ext):
            raise ValueError(f"expected N×3×{ext}×{ext} input, got {x.shape}")
        fused = None
        if self.image is not None:
            fused = self.image_proj(self.image(x))
        if self.frequency is not None:
            g = self.frequency_proj(self.frequency(x))
            fused = g if fused is None else fused + g
        if taps is not None:
            taps["fused"] = fused
        f = self.refine(fused, taps)
        n, c = f.shape[:2]
        return self.head(reshape(pool_global(f, "avg", "spatial"), (n, c)))
