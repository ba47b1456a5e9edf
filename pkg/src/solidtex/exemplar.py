"""Exemplar loading and multi-scale real patch sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from solidtex.errors import ValidationError

DIRECTIONS = ("X", "Y", "Z", "ALL")
MIN_CROP = 4


@dataclass(frozen=True)
class Exemplar:
    """A 2D RGB texture, stored channel-first as float32 in [0, 1].

    ``direction`` names the slicing axis whose cross-sections the exemplar
    describes; ``"ALL"`` marks an isotropic exemplar.
    """

    pixels: torch.Tensor
    direction: str = "ALL"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        p = self.pixels
        if p.ndim != 3 or p.shape[0] != 3:
            raise ValidationError(f"exemplar pixels must have shape (3, H, W), got {tuple(p.shape)}")
        if p.numel() and (float(p.min()) < 0.0 or float(p.max()) > 1.0):
            raise ValidationError("exemplar values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_array(cls, array, direction: str = "ALL") -> "Exemplar":
        """Build from an ``(H, W, 3)`` array, uint8 or float in [0, 1]."""
        a = np.asarray(array)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValidationError(f"expected an (H, W, 3) array, got shape {a.shape}")
        if a.dtype == np.uint8:
            a = a.astype(np.float32) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).permute(2, 0, 1).contiguous()
        return cls(t, direction)


@dataclass(frozen=True)
class ScaleSchedule:
    """Crop edges for each discriminant scale at a shared resolution.

    Scale ``n`` (1-based) crops ``resolution * 2**(n - scales)`` pixels, so the
    finest scale is a verbatim ``resolution``-sized crop and every coarser one
    halves the edge.
    """

    scales: int
    resolution: int

    def __post_init__(self):
        if self.scales < 1:
            raise ValidationError("scales must be >= 1")
        sizes = self.crop_sizes
        if sizes[0] < MIN_CROP:
            raise ValidationError(
                f"resolution {self.resolution} with {self.scales} scales gives a coarsest crop of "
                f"{sizes[0]} px; need >= {MIN_CROP}"
            )
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValidationError(f"crop sizes must be strictly increasing, got {sizes}")

    @property
    def crop_sizes(self) -> tuple[int, ...]:
        return tuple(
            int(round(self.resolution * 2.0 ** (n - self.scales))) for n in range(1, self.scales + 1)
        )

    def crop_size(self, n: int) -> int:
        if not 1 <= n <= self.scales:
            raise ValidationError(f"scale index must be in [1, {self.scales}], got {n}")
        return self.crop_sizes[n - 1]


def load_exemplar(path, direction: str = "ALL", min_size: int = MIN_CROP) -> Exemplar:
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            array = np.asarray(img)
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    if mode != "RGB":
        raise ValidationError(f"{path}: expected an 8-bit RGB image, got mode {mode!r}")
    h, w = array.shape[:2]
    if min(h, w) < min_size:
        raise ValidationError(f"{path}: image is {w}x{h}, smaller than the {min_size} px minimum crop")
    return Exemplar.from_array(array, direction)


def resize_bilinear(images: torch.Tensor, size: int) -> torch.Tensor:
    """Resize a ``(B, C, h, w)`` batch to ``size`` x ``size`` (half-pixel bilinear)."""
    if images.shape[-2:] == (size, size):
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


def crop_batch(pixels: torch.Tensor, crop: int, count: int, rng: torch.Generator) -> torch.Tensor:
    """Draw ``count`` uniformly placed ``crop`` x ``crop`` windows from ``(C, H, W)`` pixels."""
    _, h, w = pixels.shape
    if h < crop or w < crop:
        raise ValidationError(f"exemplar is {w}x{h}, smaller than the {crop} px crop")
    tops = torch.randint(0, h - crop + 1, (count,), generator=rng)
    lefts = torch.randint(0, w - crop + 1, (count,), generator=rng)
    return torch.stack(
        [pixels[:, t : t + crop, l : l + crop] for t, l in zip(tops.tolist(), lefts.tolist())]
    )


def sample_real_batch(
    ex: Exemplar, n: int, batch_size: int, sched: ScaleSchedule, rng: torch.Generator
) -> torch.Tensor:
    """Return a ``(B, 3, R, R)`` batch of random crops at scale ``n``."""
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    crops = crop_batch(ex.pixels, sched.crop_size(n), batch_size, rng)
    return resize_bilinear(crops, sched.resolution)


def crop_patch(ex: Exemplar, n: int, sched: ScaleSchedule, rng: torch.Generator) -> torch.Tensor:
    return sample_real_batch(ex, n, 1, sched, rng)[0]
