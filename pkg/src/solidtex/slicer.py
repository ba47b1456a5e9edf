"""Orthogonal and 45-degree oblique cross-sections of ``(C, Z, Y, X)`` volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from solidtex.errors import ValidationError

AXES = ("X", "Y", "Z")
OBLIQUE45 = "OBLIQUE45"

# volume tensor dimension indexed by each orthogonal axis
_AXIS_DIM = {"X": 3, "Y": 2, "Z": 1}
# unit vectors in (x, y, z) order
_UNIT = {"X": (1.0, 0.0, 0.0), "Y": (0.0, 1.0, 0.0), "Z": (0.0, 0.0, 1.0)}
# the two remaining axes, in cyclic order, for a rotation about the key
_OTHERS = {"X": ("Y", "Z"), "Y": ("Z", "X"), "Z": ("X", "Y")}


@dataclass
class SliceBatch:
    """Stacked ``(B, C, S, S)`` slices with the plane each came from.

    ``axes[i]`` is ``"X"``/``"Y"``/``"Z"`` for orthogonal slices or ``"OBLIQUE45"``;
    ``positions[i]`` is the slice index, or the signed plane offset for oblique
    slices.
    """

    pixels: torch.Tensor
    axes: list[str]
    positions: list[float]


def _check_volume(v: torch.Tensor) -> int:
    if v.ndim != 4 or not (v.shape[1] == v.shape[2] == v.shape[3]):
        raise ValidationError(f"expected a cubic (C, S, S, S) volume, got shape {tuple(v.shape)}")
    return v.shape[1]


def slice_at(v: torch.Tensor, axis: str, index: int) -> torch.Tensor:
    """The plane of voxels at ``index`` along ``axis``.

    Z slices are ``(C, Y, X)``, Y slices ``(C, Z, X)``, X slices ``(C, Z, Y)``.
    """
    size = _check_volume(v)
    if axis not in _AXIS_DIM:
        raise ValidationError(f"axis must be one of {AXES}, got {axis!r}")
    if not 0 <= index < size:
        raise ValidationError(f"slice index {index} out of range [0, {size - 1}]")
    return v.select(_AXIS_DIM[axis], index)


def sample_slices(
    v: torch.Tensor, axes, count: int, rng: torch.Generator | None = None
) -> SliceBatch:
    """Draw ``count`` orthogonal slices, axis and index independently uniform."""
    size = _check_volume(v)
    axes = list(axes)
    if not axes:
        raise ValidationError("axis set must be nonempty")
    bad = [a for a in axes if a not in _AXIS_DIM]
    if bad:
        raise ValidationError(f"unknown slicing axes {bad}")
    if count < 1:
        raise ValidationError("slice count must be >= 1")
    which = torch.randint(0, len(axes), (count,), generator=rng).tolist()
    index = torch.randint(0, size, (count,), generator=rng).tolist()
    picked = [axes[w] for w in which]
    pixels = torch.stack([v.select(_AXIS_DIM[a], i) for a, i in zip(picked, index)])
    return SliceBatch(pixels, picked, [float(i) for i in index])


def trilinear(v: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinearly interpolate ``v`` at ``(..., 3)`` points given as (x, y, z)
    voxel-index coordinates; returns ``(C, ...)``.

    Points are clamped to ``[0, S - 1]``. Integer coordinates return voxel
    values exactly.
    """
    c, d, h, w = v.shape
    dims = (w, h, d)
    flat = points.reshape(-1, 3)
    lo, frac = [], []
    for k in range(3):
        p = flat[:, k].clamp(0, dims[k] - 1)
        i0 = p.floor().clamp(max=max(dims[k] - 2, 0))
        lo.append(i0.long())
        frac.append((p - i0).to(v.dtype))
    x0, y0, z0 = lo
    fx, fy, fz = frac
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    z1 = (z0 + 1).clamp(max=d - 1)

    def at(z, y, x):
        return v[:, z, y, x]

    c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx
    c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx
    c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx
    c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz
    return out.reshape(c, *points.shape[:-1])


def oblique_half_extent(size: int, offset: float) -> float:
    """Half-edge of the largest centered square on the 45-degree plane at ``offset``."""
    centre = (size - 1) / 2
    return min(centre, math.sqrt(2) * centre - abs(offset))


def slice_oblique45(v: torch.Tensor, rotation_axis: str, offset: float = 0.0, rng=None) -> torch.Tensor:
    """Sample an ``S x S`` grid on a plane turned 45 degrees about ``rotation_axis``.

    The plane contains the rotation axis and has normal ``(b + c) / sqrt(2)``,
    where ``b, c`` are the other two axes; ``offset`` is its signed distance
    from the volume centre in voxels. Rows run along ``(b - c) / sqrt(2)``,
    columns along the rotation axis. The grid covers the largest centred square
    inside the plane's intersection with the voxel-centre cube. ``rng`` is
    accepted for signature symmetry and unused.
    """
    size = _check_volume(v)
    if rotation_axis not in _UNIT:
        raise ValidationError(f"rotation axis must be one of {AXES}, got {rotation_axis!r}")
    if size < 2:
        raise ValidationError("oblique slicing needs a volume edge >= 2")
    half = oblique_half_extent(size, offset)
    if half <= 0:
        raise ValidationError(f"45-degree plane at offset {offset} misses the {size}^3 volume")
    b, c = _OTHERS[rotation_axis]
    along = torch.tensor(_UNIT[rotation_axis], dtype=torch.float64)
    ub, uc = torch.tensor(_UNIT[b], dtype=torch.float64), torch.tensor(_UNIT[c], dtype=torch.float64)
    across = (ub - uc) / math.sqrt(2)
    normal = (ub + uc) / math.sqrt(2)
    centre = torch.full((3,), (size - 1) / 2, dtype=torch.float64) + offset * normal
    steps = torch.linspace(-half, half, size, dtype=torch.float64)
    rows, cols = torch.meshgrid(steps, steps, indexing="ij")
    points = centre + rows[..., None] * across + cols[..., None] * along
    return trilinear(v, points.clamp(0, size - 1))


def sample_oblique_slices(v: torch.Tensor, count: int, rng: torch.Generator | None = None) -> SliceBatch:
    """Random full-size 45-degree slices: rotation axis uniform, offset uniform
    over the range where the inscribed square keeps its full ``S - 1`` span."""
    size = _check_volume(v)
    limit = (math.sqrt(2) - 1) * (size - 1) / 2
    which = torch.randint(0, 3, (count,), generator=rng).tolist()
    offsets = ((torch.rand(count, generator=rng, dtype=torch.float64) * 2 - 1) * limit).tolist()
    pixels = torch.stack([slice_oblique45(v, AXES[w], o) for w, o in zip(which, offsets)])
    return SliceBatch(pixels, [OBLIQUE45] * count, offsets)
