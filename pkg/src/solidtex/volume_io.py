"""Volume persistence (STSV files), PNG slice stacks, and point sampling.

STSV layout, all integers little-endian::

    b"STSV"  u16 version  u32 X  u32 Y  u32 Z  payload[X*Y*Z*3]

The payload is 8-bit RGB, X varying fastest, then Y, then Z.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from solidtex.errors import FormatError, ValidationError
from solidtex.slicer import _AXIS_DIM, slice_at, trilinear

MAGIC = b"STSV"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")


def _as_array(v) -> np.ndarray:
    if isinstance(v, torch.Tensor):
        v = v.detach().cpu().numpy()
    return np.asarray(v, dtype=np.float64)


def quantize_bytes(v) -> np.ndarray:
    """Map [0, 1] values to uint8 by ``round(value * 255)``, halves rounded up."""
    a = _as_array(v)
    if not np.all(np.isfinite(a)):
        raise ValidationError("volume contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValidationError("volume values must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def quantize(v) -> torch.Tensor:
    """The float32 volume that a save/load round trip produces."""
    return torch.from_numpy(quantize_bytes(v).astype(np.float32) / 255.0)


def encode_volume(v) -> bytes:
    q = quantize_bytes(v)
    if q.ndim != 4 or q.shape[0] != 3:
        raise ValidationError(f"expected a (3, Z, Y, X) volume, got shape {q.shape}")
    _, z, y, x = q.shape
    payload = np.ascontiguousarray(q.transpose(1, 2, 3, 0)).tobytes()
    return _HEADER.pack(MAGIC, VERSION, x, y, z) + payload


def decode_volume(data: bytes) -> torch.Tensor:
    if len(data) < _HEADER.size:
        raise FormatError(f"file is {len(data)} bytes, shorter than the {_HEADER.size}-byte header")
    magic, version, x, y, z = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    expected = x * y * z * 3
    payload = data[_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected} for {x}x{y}x{z}")
    a = np.frombuffer(payload, dtype=np.uint8).reshape(z, y, x, 3).transpose(3, 0, 1, 2)
    return torch.from_numpy(a.astype(np.float32) / 255.0)


def save_volume(v, path) -> None:
    Path(path).write_bytes(encode_volume(v))


def load_volume(path) -> torch.Tensor:
    """Read an STSV file into a float32 ``(3, Z, Y, X)`` tensor."""
    return decode_volume(Path(path).read_bytes())


def slice_filename(index: int, count: int) -> str:
    return f"slice_{index:0{max(3, len(str(count - 1)))}d}.png"


def slice_image(s) -> Image.Image:
    """A ``(3, H, W)`` slice as an 8-bit RGB image."""
    return Image.fromarray(np.ascontiguousarray(quantize_bytes(s).transpose(1, 2, 0)), mode="RGB")


def export_slice_stack(v, axis: str, dir_path) -> int:
    """Write one PNG per index along ``axis``; returns the number written."""
    v = torch.as_tensor(v)
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    count = v.shape[_AXIS_DIM[axis]] if axis in _AXIS_DIM else 0
    if not count:
        raise ValidationError(f"axis must be one of X, Y, Z, got {axis!r}")
    for i in range(count):
        slice_image(slice_at(v, axis, i)).save(out / slice_filename(i, count))
    return count


def import_slice_stack(dir_path, axis: str) -> torch.Tensor:
    """Reassemble a stack written by :func:`export_slice_stack`."""
    if axis not in _AXIS_DIM:
        raise ValidationError(f"axis must be one of X, Y, Z, got {axis!r}")
    files = sorted(Path(dir_path).glob("slice_*.png"))
    if not files:
        raise FileNotFoundError(f"no slice_*.png files in {dir_path}")
    planes = []
    for f in files:
        with Image.open(f) as img:
            planes.append(torch.from_numpy(np.asarray(img.convert("RGB")).astype(np.float32) / 255.0).permute(2, 0, 1))
    return torch.stack(planes, dim=_AXIS_DIM[axis])


def sample_volume(v, uvw) -> torch.Tensor:
    """Trilinear colour at normalized ``(u, v, w)`` coordinates in [0, 1]^3.

    ``u, v, w`` run along X, Y, Z; voxel ``i`` has its centre at ``(i + 0.5) / S``
    and lookups beyond the outer centres clamp. Accepts ``(3,)`` or ``(N, 3)``
    coordinates and returns matching ``(3,)`` or ``(N, 3)`` colours.
    """
    v = torch.as_tensor(v)
    p = torch.as_tensor(uvw, dtype=torch.float64)
    if p.shape[-1] != 3:
        raise ValidationError("coordinates must be (u, v, w) triples")
    if not torch.all(torch.isfinite(p)) or p.min() < 0 or p.max() > 1:
        raise ValidationError("coordinates must lie in [0, 1]")
    _, d, h, w = v.shape
    dims = torch.tensor([w, h, d], dtype=torch.float64)
    idx = p * dims - 0.5
    return trilinear(v, idx).movedim(0, -1)
