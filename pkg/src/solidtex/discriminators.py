"""Per-scale 2D slice critics with an optional frozen VGG-19 front-end."""

from __future__ import annotations

import functools
import hashlib
import os
from pathlib import Path

import torch
import torch.nn as nn

from solidtex.errors import ConfigError, ValidationError

FRONT_END_ENV = "SOLIDTEX_FRONTEND_WEIGHTS"
# conv1_1 .. pool3 of torchvision's vgg19().features
VGG_FEATURE_LAYERS = 19
VGG_POOLING = 3
VGG_CHANNELS = 256
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _vgg19_blocks() -> nn.Sequential:
    # same layout and state-dict keys as vgg19().features, without the classifier
    from torchvision.models.vgg import cfgs, make_layers

    return make_layers(cfgs["E"])[:VGG_FEATURE_LAYERS]


class VGGFrontEnd(nn.Module):
    """First three convolutional blocks of VGG-19, weights frozen.

    Takes RGB in [0, 1], applies ImageNet normalization, returns 256-channel
    maps at 1/8 resolution. Gradients flow to the input only.
    """

    out_channels = VGG_CHANNELS
    downsampling = 2**VGG_POOLING

    def __init__(self, state_dict: dict):
        super().__init__()
        self.features = _vgg19_blocks()
        own = self.features.state_dict()
        picked = {}
        for key in own:
            for candidate in (key, f"features.{key}"):
                if candidate in state_dict:
                    picked[key] = state_dict[candidate]
                    break
            else:
                raise ConfigError(f"front-end weights are missing tensor {key!r}")
        try:
            self.features.load_state_dict(picked)
        except RuntimeError as exc:
            raise ConfigError(f"front-end weights do not fit the VGG-19 layout: {exc}") from exc
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @classmethod
    def from_file(cls, path) -> "VGGFrontEnd":
        if path is None:
            raise ConfigError(
                f"front-end enabled but no weight file given (config key or ${FRONT_END_ENV})"
            )
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"front-end weight file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ConfigError(f"cannot read front-end weights {path}: {exc}") from exc
        if not isinstance(state, dict):
            raise ConfigError(f"front-end weight file {path} does not hold a state dict")
        return cls(state)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        return self.features((x - self.mean) / self.std)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def resolve_front_end_path(configured=None):
    return configured if configured is not None else os.environ.get(FRONT_END_ENV)


class SliceCritic(nn.Module):
    """Fully convolutional critic: leaky ReLU between layers, no normalization,
    single-channel response field."""

    def __init__(self, in_channels=3, width=64, kernels=(3, 3, 3, 1, 1), leaky_slope=0.2, response_gain=1.0):
        super().__init__()
        layers = []
        channels = in_channels
        for i, k in enumerate(kernels):
            last = i == len(kernels) - 1
            out = 1 if last else width
            layers.append(nn.Conv2d(channels, out, k, padding=k // 2))
            if not last:
                layers.append(nn.LeakyReLU(leaky_slope))
            channels = out
        self.layers = nn.Sequential(*layers)
        self.leaky_slope = leaky_slope
        self.response_gain = response_gain
        self.reset_parameters()

    def reset_parameters(self):
        # He init; torch's default leaves the mean-field score with an input
        # gradient norm near 1e-4, far from the penalty's target of 1
        convs = [m for m in self.layers if isinstance(m, nn.Conv2d)]
        for i, conv in enumerate(convs):
            last = i == len(convs) - 1
            nn.init.kaiming_normal_(
                conv.weight, a=self.leaky_slope, nonlinearity="linear" if last else "leaky_relu"
            )
            nn.init.zeros_(conv.bias)
        with torch.no_grad():
            convs[-1].weight.mul_(self.response_gain)

    def forward(self, x):
        return self.layers(x)


def front_end_features(front_end: VGGFrontEnd | None, images: torch.Tensor) -> torch.Tensor:
    """Front-end feature maps, or the RGB input unchanged when disabled."""
    return images if front_end is None else front_end(images)


class SliceDiscriminators(nn.Module):
    """``scales`` critics sharing one architecture and one frozen front-end.

    ``score(n, images)`` is the mean of critic ``n``'s response field per image.
    """

    def __init__(
        self,
        scales: int,
        resolution: int | None = None,
        width: int = 64,
        kernels=(3, 3, 3, 1, 1),
        leaky_slope: float = 0.2,
        front_end: VGGFrontEnd | None = None,
    ):
        super().__init__()
        self.scales = scales
        self.resolution = resolution
        in_channels = front_end.out_channels if front_end is not None else 3
        # averaging over an E x E field shrinks the input gradient by ~1/E;
        # scaling the last layer by E/2 starts it near the penalty's target
        gain = 1.0
        if resolution is not None:
            edge = resolution // (front_end.downsampling if front_end is not None else 1)
            gain = max(edge, 2) / 2
        self.critics = nn.ModuleList(
            [SliceCritic(in_channels, width, kernels, leaky_slope, gain) for _ in range(scales)]
        )
        self.front_end = front_end

    def critic(self, n: int) -> SliceCritic:
        if not 1 <= n <= self.scales:
            raise ValidationError(f"scale index must be in [1, {self.scales}], got {n}")
        return self.critics[n - 1]

    def score(self, n: int, images: torch.Tensor) -> torch.Tensor:
        critic = self.critic(n)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValidationError(f"expected a (B, 3, H, W) batch, got {tuple(images.shape)}")
        if self.resolution is not None and images.shape[-2:] != (self.resolution, self.resolution):
            raise ValidationError(
                f"critic expects {self.resolution}x{self.resolution} images, "
                f"got {images.shape[-1]}x{images.shape[-2]}"
            )
        field = critic(front_end_features(self.front_end, images))
        return field.mean(dim=(1, 2, 3))

    def scorer(self, n: int):
        return functools.partial(self.score, n)


def score(D: SliceDiscriminators, n: int, images: torch.Tensor) -> torch.Tensor:
    return D.score(n, images)
