"""Fully convolutional 3D generator driven by a pyramid of volumetric noises."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from solidtex.errors import ConfigError, ValidationError

GENERATOR_FORMAT = "solidtex-generator/1"


@dataclass
class NoisePyramid:
    """Noise levels ordered coarse to fine; each is ``(B, C, e, e, e)`` and doubles the edge."""

    levels: list[torch.Tensor]

    @property
    def edges(self) -> tuple[int, ...]:
        return tuple(z.shape[-1] for z in self.levels)

    def __len__(self):
        return len(self.levels)


def check_volume_edge(size: int, noise_levels: int) -> None:
    step = 2 ** (noise_levels - 1)
    if size % step or size < 2 * step:
        raise ValidationError(
            f"volume edge {size} is not admissible for {noise_levels} noise levels: "
            f"it must be divisible by {step} and at least {2 * step}"
        )


def make_noise_pyramid(
    size: int, levels: int, channels: int, rng: torch.Generator | None = None, batch: int = 1
) -> NoisePyramid:
    if levels < 1:
        raise ValidationError("noise pyramid needs at least one level")
    check_volume_edge(size, levels)
    edges = [size // 2 ** (levels - 1 - k) for k in range(levels)]
    return NoisePyramid(
        [torch.randn(batch, channels, e, e, e, generator=rng) for e in edges]
    )


class ConvBlock3d(nn.Module):
    """3x3x3 -> 3x3x3 -> 1x1x1 convolutions; BN + leaky ReLU after the first two.

    Convolutions feeding batch norm carry no bias (BN's shift replaces it).
    """

    def __init__(self, in_channels: int, out_channels: int, leaky_slope: float = 0.2):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm3d(out_channels),
            nn.LeakyReLU(leaky_slope),
            nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm3d(out_channels),
            nn.LeakyReLU(leaky_slope),
            nn.Conv3d(out_channels, out_channels, 1),
        )

    def forward(self, x):
        return self.layers(x)


class SolidTextureGenerator(nn.Module):
    """Cascade generator: each noise level is preprocessed, the running feature
    map is upsampled x2 (nearest) and concatenated with it, then merged.

    The output is squashed to [0, 1] with ``(tanh + 1) / 2``.
    """

    def __init__(
        self,
        noise_levels: int = 3,
        noise_channels: int = 8,
        width: int = 32,
        leaky_slope: float = 0.2,
    ):
        super().__init__()
        if noise_levels < 1:
            raise ValidationError("noise_levels must be >= 1")
        self.noise_levels = noise_levels
        self.noise_channels = noise_channels
        self.width = width
        self.leaky_slope = leaky_slope
        self.preprocess = nn.ModuleList(
            [ConvBlock3d(noise_channels, width, leaky_slope) for _ in range(noise_levels)]
        )
        self.merge = nn.ModuleList(
            [ConvBlock3d(2 * width, width, leaky_slope) for _ in range(noise_levels - 1)]
        )
        self.output = nn.Sequential(
            nn.Conv3d(width, width, 3, padding=1, bias=False),
            nn.BatchNorm3d(width),
            nn.LeakyReLU(leaky_slope),
            nn.Conv3d(width, 3, 3, padding=1),
        )

    @property
    def arch(self) -> dict:
        return {
            "noise_levels": self.noise_levels,
            "noise_channels": self.noise_channels,
            "width": self.width,
            "leaky_slope": self.leaky_slope,
        }

    def forward(self, levels):
        if isinstance(levels, NoisePyramid):
            levels = levels.levels
        if len(levels) != self.noise_levels:
            raise ValidationError(
                f"generator expects {self.noise_levels} noise levels, got {len(levels)}"
            )
        y = self.preprocess[0](levels[0])
        for k in range(1, self.noise_levels):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = torch.cat([y, self.preprocess[k](levels[k])], dim=1)
            y = self.merge[k - 1](y)
        return (torch.tanh(self.output(y)) + 1) / 2

    def receptive_field(self) -> int:
        # extent, in output voxels, of the region touched by one input voxel at
        # any level; nearest x2 upsampling doubles the extent, each block adds 4
        worst = 0
        for level in range(self.noise_levels):
            extent = 1 + 4 if level == 0 else 1 + 4 + 4
            for _ in range(level + 1, self.noise_levels):
                extent = 2 * extent + 4
            worst = max(worst, extent + 4)
        return worst


def generate(G: nn.Module, z: NoisePyramid) -> torch.Tensor:
    """Synthesize one ``(3, S, S, S)`` volume (axes C, Z, Y, X) from a single-item pyramid."""
    if len(z) != getattr(G, "noise_levels", len(z)):
        raise ValidationError(f"generator expects {G.noise_levels} noise levels, got {len(z)}")
    return G(z.levels)[0]


def receptive_field(module: nn.Module) -> int:
    """Analytic receptive field of a stride-1 convolution stack or a generator."""
    if isinstance(module, SolidTextureGenerator):
        return module.receptive_field()
    rf = 1
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            if any(s != 1 for s in m.stride):
                raise ValidationError("receptive_field only supports stride-1 convolutions")
            rf += (m.kernel_size[0] - 1) * m.dilation[0]
    return rf


def generator_archive(G: SolidTextureGenerator) -> dict:
    return {
        "format": GENERATOR_FORMAT,
        "arch": G.arch,
        "state": {k: v.detach().clone() for k, v in G.state_dict().items()},
    }


def generator_from_archive(archive: dict) -> SolidTextureGenerator:
    if not isinstance(archive, dict) or archive.get("format") != GENERATOR_FORMAT:
        found = archive.get("format") if isinstance(archive, dict) else type(archive).__name__
        raise ConfigError(f"unsupported generator archive format {found!r}, expected {GENERATOR_FORMAT!r}")
    G = SolidTextureGenerator(**archive["arch"])
    G.load_state_dict(archive["state"])
    return G


def save_generator(G: SolidTextureGenerator, path) -> None:
    torch.save(generator_archive(G), Path(path))


def load_generator(path) -> SolidTextureGenerator:
    """Load a generator from a standalone archive or a training checkpoint."""
    archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    if isinstance(archive, dict) and "generator" in archive:
        archive = archive["generator"]
    return generator_from_archive(archive)
