"""Desk-scale quality proxies and the two ablation protocols.

Neither metric comes with a published target: the histogram distance checks
that slices reproduce the exemplar's colour marginals, and continuity checks
that neighbouring slices agree.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from solidtex.errors import ValidationError
from solidtex.exemplar import Exemplar
from solidtex.generator import make_noise_pyramid
from solidtex.slicer import AXES, _AXIS_DIM, sample_slices
from solidtex.trainer import TrainConfig, direction_map, fit

DEFAULT_BINS = 16
DEFAULT_SLICES = 64


def _pixels(images) -> np.ndarray:
    """Flatten images to an ``(N, 3)`` float64 pixel array."""
    if isinstance(images, Exemplar):
        images = images.pixels
    if isinstance(images, (list, tuple)):
        if not images:
            raise ValidationError("empty image set")
        return np.concatenate([_pixels(i) for i in images])
    a = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 3:
        raise ValidationError(f"expected (3, H, W) or (B, 3, H, W) images, got shape {a.shape}")
    if a.size == 0:
        raise ValidationError("empty image set")
    return a.transpose(0, 2, 3, 1).reshape(-1, 3)


def color_histograms(images, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Per-channel normalized histograms over [0, 1], shape ``(3, bins)``."""
    if bins < 2:
        raise ValidationError("bins must be >= 2")
    px = _pixels(images)
    return np.stack([np.histogram(px[:, c], bins=bins, range=(0.0, 1.0))[0] / len(px) for c in range(3)])


def color_histogram_distance(slices, ex, bins: int = DEFAULT_BINS) -> float:
    """Mean over RGB channels of the L1 distance between normalized histograms; in [0, 2]."""
    a = color_histograms(slices, bins)
    b = color_histograms(ex, bins)
    return float(np.abs(a - b).sum(axis=1).mean())


def continuity(v: torch.Tensor, axis: str) -> float:
    """Mean absolute difference between consecutive slices along ``axis``."""
    if axis not in _AXIS_DIM:
        raise ValidationError(f"axis must be one of {AXES}, got {axis!r}")
    dim = _AXIS_DIM[axis]
    if v.shape[dim] < 2:
        raise ValidationError("continuity needs at least two slices")
    return float(torch.diff(v.double(), dim=dim).abs().mean())


def fingerprint(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class EvalReport:
    histogram_distance: float
    continuity: float | None
    per_axis: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def _make_report(histogram_distance, continuity_value, per_axis, config) -> EvalReport:
    config = dict(config or {})
    return EvalReport(histogram_distance, continuity_value, per_axis, config, fingerprint(config))


def evaluate_volume(
    v: torch.Tensor,
    exemplars,
    bins: int = DEFAULT_BINS,
    slices: int = DEFAULT_SLICES,
    seed: int = 0,
    config: dict | None = None,
) -> EvalReport:
    """Score one ``(3, S, S, S)`` volume against its exemplar(s).

    ``histogram_distance`` compares ``slices`` random orthogonal slices (over
    the mapped axes) with the exemplar assigned to each slice's axis, weighting
    groups by slice count. ``per_axis`` holds the distance of every slice along
    an axis and that axis's continuity.
    """
    dmap = direction_map(exemplars)
    v = v.detach()
    rng = torch.Generator().manual_seed(seed)
    batch = sample_slices(v, list(dmap), slices, rng)
    groups: dict[int, list[int]] = {}
    for i, a in enumerate(batch.axes):
        groups.setdefault(id(dmap[a]), []).append(i)
    by_id = {id(e): e for e in dmap.values()}
    hist = sum(
        len(idx) * color_histogram_distance(batch.pixels[idx], by_id[key], bins) for key, idx in groups.items()
    ) / slices
    per_axis = {}
    for a in AXES:
        entry = {"continuity": continuity(v, a)}
        if a in dmap:
            every = v.movedim(_AXIS_DIM[a], 0)
            entry["histogram_distance"] = color_histogram_distance(every, dmap[a], bins)
        per_axis[a] = entry
    cont = float(np.mean([per_axis[a]["continuity"] for a in AXES]))
    meta = {"bins": bins, "slices": slices, "seed": seed, "volume_edge": int(v.shape[-1]), **(config or {})}
    return _make_report(float(hist), cont, per_axis, meta)


def evaluate_slices(slices, ex, bins: int = DEFAULT_BINS, config: dict | None = None) -> EvalReport:
    """Report for a loose image set; continuity is undefined and left ``None``."""
    meta = {"bins": bins, "slices": len(slices), **(config or {})}
    return _make_report(color_histogram_distance(slices, ex, bins), None, {}, meta)


@torch.no_grad()
def synthesize_eval_volume(G, size: int, seed: int) -> torch.Tensor:
    was_training = G.training
    G.eval()
    try:
        rng = torch.Generator().manual_seed(seed)
        z = make_noise_pyramid(size, G.noise_levels, G.noise_channels, rng)
        return G(z.levels)[0]
    finally:
        G.train(was_training)


def evaluate_generator(
    G,
    exemplars,
    size: int,
    seed: int = 0,
    bins: int = DEFAULT_BINS,
    slices: int = DEFAULT_SLICES,
    config: dict | None = None,
) -> EvalReport:
    """Synthesize a ``size``-edge volume in evaluation mode and score it."""
    v = synthesize_eval_volume(G, size, seed)
    return evaluate_volume(v, exemplars, bins, slices, seed, config)


def train_and_evaluate(config: TrainConfig, exemplars, out_dir=None, bins=DEFAULT_BINS, slices=DEFAULT_SLICES):
    state, metrics = fit(config, exemplars, out_dir=out_dir)
    report = evaluate_generator(
        state.generator, exemplars, config.resolution, config.seed, bins, slices, config.to_dict()
    )
    return report, state, metrics


def ablate_scales(config: TrainConfig, exemplar, scale_counts, out_dir=None, **kw) -> list[EvalReport]:
    """Train one model per scale count under the same seed and budget."""
    reports = []
    for n in scale_counts:
        if n < 1:
            raise ValidationError("scale counts must be >= 1")
        cfg = replace(config, scales=int(n))
        run_dir = Path(out_dir) / f"scales_{n}" if out_dir is not None else None
        reports.append(train_and_evaluate(cfg, exemplar, run_dir, **kw)[0])
    return reports


def ablate_slicing(config: TrainConfig, exemplar, out_dir=None, **kw) -> tuple[EvalReport, EvalReport]:
    """Train with orthogonal fake slices and with 45-degree slices added."""
    reports = []
    for mode in ("orthogonal", "oblique45"):
        cfg = replace(config, slicing=mode)
        run_dir = Path(out_dir) / f"slicing_{mode}" if out_dir is not None else None
        reports.append(train_and_evaluate(cfg, exemplar, run_dir, **kw)[0])
    return reports[0], reports[1]


def slicing_gap(orthogonal: EvalReport, oblique: EvalReport) -> dict:
    return {
        "histogram_distance_gap": oblique.histogram_distance - orthogonal.histogram_distance,
        "continuity_gap": oblique.continuity - orthogonal.continuity,
    }
