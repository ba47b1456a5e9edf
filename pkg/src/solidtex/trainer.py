"""Alternating WGAN-GP training of the generator against the per-scale critics."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from solidtex.discriminators import SliceDiscriminators, VGGFrontEnd, resolve_front_end_path
from solidtex.errors import ConfigError, NonFiniteLossError, ValidationError
from solidtex.exemplar import Exemplar, ScaleSchedule, crop_batch, resize_bilinear
from solidtex.generator import (
    SolidTextureGenerator,
    check_volume_edge,
    generator_archive,
    make_noise_pyramid,
)
from solidtex.slicer import AXES, SliceBatch, sample_oblique_slices, sample_slices

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "solidtex-checkpoint/1"
SLICING_MODES = ("orthogonal", "oblique45")
# keys that change tensor shapes or the training trajectory's meaning; a resume
# must match them exactly
_ARCH_KEYS = (
    "scales",
    "noise_levels",
    "resolution",
    "noise_channels",
    "generator_width",
    "critic_width",
    "critic_kernels",
    "leaky_slope",
    "front_end_enabled",
)


@dataclass(frozen=True)
class TrainConfig:
    scales: int = 5
    noise_levels: int = 3
    resolution: int = 128
    gp_weight: float = 10.0
    lr_generator: float = 0.0005
    lr_critic: float = 0.0003
    adam_betas: tuple[float, float] = (0.5, 0.9)
    generator_batch: int = 1
    critic_batch: int = 72
    iterations: int = 30000
    seed: int = 0
    noise_channels: int = 8
    generator_width: int = 32
    critic_width: int = 64
    critic_kernels: tuple[int, ...] = (3, 3, 3, 1, 1)
    leaky_slope: float = 0.2
    front_end_enabled: bool = True
    front_end_weights: str | None = None
    slicing: str = "orthogonal"
    checkpoint_every: int = 1000

    def __post_init__(self):
        # JSON/YAML round trips hand back lists
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "critic_kernels", tuple(self.critic_kernels))
        self.validate()

    @property
    def schedule(self) -> ScaleSchedule:
        return ScaleSchedule(self.scales, self.resolution)

    @property
    def scale_edges(self) -> tuple[int, ...]:
        return self.schedule.crop_sizes

    def validate(self) -> None:
        if self.lr_generator <= 0 or self.lr_critic <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.gp_weight < 0:
            raise ValidationError("gp_weight must be >= 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ValidationError("adam_betas must be two values in [0, 1)")
        for name in ("generator_batch", "critic_batch", "noise_channels", "generator_width", "critic_width"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if self.checkpoint_every < 0:
            raise ValidationError("checkpoint_every must be >= 0")
        if not self.critic_kernels or any(k < 1 or k % 2 == 0 for k in self.critic_kernels):
            raise ValidationError("critic_kernels must be a nonempty list of odd sizes")
        if self.slicing not in SLICING_MODES:
            raise ValidationError(f"slicing must be one of {SLICING_MODES}, got {self.slicing!r}")
        for edge in self.schedule.crop_sizes:
            check_volume_edge(edge, self.noise_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["critic_kernels"] = list(self.critic_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        return cls(**d)


def direction_map(exemplars) -> dict[str, Exemplar]:
    """Map each slicing axis to the exemplar its slices are compared with."""
    if isinstance(exemplars, Exemplar):
        exemplars = [exemplars]
    if isinstance(exemplars, dict):
        out = dict(exemplars)
        bad = sorted(set(out) - set(AXES))
        if bad:
            raise ConfigError(f"direction map has unknown axes {bad}")
    else:
        exemplars = list(exemplars)
        if not exemplars:
            raise ConfigError("at least one exemplar is required")
        iso = [e for e in exemplars if e.direction == "ALL"]
        if iso:
            if len(exemplars) != 1:
                raise ConfigError("an isotropic (ALL) exemplar cannot be combined with others")
            return {a: iso[0] for a in AXES}
        out = {}
        for e in exemplars:
            if e.direction in out:
                raise ConfigError(f"two exemplars are assigned to axis {e.direction}")
            out[e.direction] = e
    if len(out) < 2:
        raise ConfigError("anisotropic training needs exemplars for at least two orthogonal axes")
    return {a: out[a] for a in AXES if a in out}


def is_isotropic(dmap: dict[str, Exemplar]) -> bool:
    return len(dmap) == 3 and len({id(e) for e in dmap.values()}) == 1


def generator_loss(critic, fake: torch.Tensor) -> torch.Tensor:
    """Negative mean critic score of generated slices."""
    return -critic(fake).mean()


def interpolate_pairs(fake, real, rng=None):
    """Points ``eps * fake + (1 - eps) * real`` with one uniform ``eps`` per pair."""
    if fake.shape != real.shape:
        raise ValidationError(f"fake/real shapes differ: {tuple(fake.shape)} vs {tuple(real.shape)}")
    eps = torch.rand(fake.shape[0], *([1] * (fake.ndim - 1)), generator=rng, dtype=fake.dtype)
    return eps * fake + (1 - eps) * real


def gradient_norms(critic, points: torch.Tensor) -> torch.Tensor:
    """Per-sample ``||grad_x critic(x)||_2``, kept differentiable for the critic update."""
    r = points.detach().requires_grad_(True)
    scores = critic(r)
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), r, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(r)
    # vector_norm has a zero subgradient at 0, so constant critics stay finite
    return torch.linalg.vector_norm(grad.flatten(1), dim=1)


def gradient_penalty(critic, fake, real, rng=None) -> torch.Tensor:
    """Mean of ``(||grad_r critic(r)||_2 - 1)**2`` over random interpolates ``r``."""
    r = interpolate_pairs(fake.detach(), real.detach(), rng)
    return ((gradient_norms(critic, r) - 1) ** 2).mean()


def discriminator_loss(critic, fake, real, gp_weight: float, rng=None) -> torch.Tensor:
    fake = fake.detach()
    loss = critic(fake).mean() - critic(real).mean()
    if gp_weight:
        loss = loss + gp_weight * gradient_penalty(critic, fake, real, rng)
    return loss


@dataclass
class StepMetrics:
    iteration: int
    critic_loss: list[float]
    generator_loss: float
    scale: int
    wall_time: float

    def record(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    config: TrainConfig
    generator: torch.nn.Module
    discriminators: SliceDiscriminators
    generator_optimizer: torch.optim.Optimizer
    critic_optimizers: list[torch.optim.Optimizer]
    rng: torch.Generator
    iteration: int = 0
    front_end_checksum: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        config: TrainConfig,
        generator: torch.nn.Module | None = None,
        discriminators: SliceDiscriminators | None = None,
        front_end: VGGFrontEnd | None = None,
    ) -> "TrainState":
        """Initialize models and optimizers deterministically from ``config.seed``.

        ``generator``/``discriminators`` override the configured architectures
        (used with lightweight stand-ins in tests).
        """
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            if generator is None:
                generator = SolidTextureGenerator(
                    config.noise_levels, config.noise_channels, config.generator_width, config.leaky_slope
                )
            if discriminators is None:
                if config.front_end_enabled and front_end is None:
                    front_end = VGGFrontEnd.from_file(resolve_front_end_path(config.front_end_weights))
                discriminators = SliceDiscriminators(
                    config.scales,
                    config.resolution,
                    config.critic_width,
                    config.critic_kernels,
                    config.leaky_slope,
                    front_end if config.front_end_enabled else None,
                )
        if discriminators.scales != config.scales:
            raise ConfigError("discriminator scale count does not match the config")
        opt_g = torch.optim.Adam(generator.parameters(), lr=config.lr_generator, betas=config.adam_betas)
        opt_d = [
            torch.optim.Adam(c.parameters(), lr=config.lr_critic, betas=config.adam_betas)
            for c in discriminators.critics
        ]
        rng = torch.Generator().manual_seed(config.seed)
        fe = discriminators.front_end
        return cls(config, generator, discriminators, opt_g, opt_d, rng, 0, fe.checksum() if fe is not None else None)


def fake_slices(volumes: torch.Tensor, axes, count: int, slicing: str, rng) -> SliceBatch:
    """Slice ``count`` images from a ``(B, 3, S, S, S)`` volume batch, spread over volumes.

    In ``oblique45`` mode each slice picks one of the three orthogonal or three
    45-degree plane families with equal probability.
    """
    per = math.ceil(count / volumes.shape[0])
    pixels, picked, positions = [], [], []
    for v in volumes:
        if slicing == "oblique45":
            oblique = torch.rand(per, generator=rng) < 0.5
            k = int(oblique.sum())
            parts = []
            if per - k:
                parts.append(sample_slices(v, axes, per - k, rng))
            if k:
                parts.append(sample_oblique_slices(v, k, rng))
            batch = SliceBatch(
                torch.cat([p.pixels for p in parts]),
                [a for p in parts for a in p.axes],
                [q for p in parts for q in p.positions],
            )
        else:
            batch = sample_slices(v, axes, per, rng)
        pixels.append(batch.pixels)
        picked += batch.axes
        positions += batch.positions
    return SliceBatch(torch.cat(pixels)[:count], picked[:count], positions[:count])


def real_patches(dmap, slice_axes, n, sched: ScaleSchedule, rng) -> torch.Tensor:
    """Real crops paired with fake slices: each from the exemplar mapped to that slice's axis."""
    crop = sched.crop_size(n)
    out = [None] * len(slice_axes)
    for axis in AXES + ("OBLIQUE45",):
        idx = [i for i, a in enumerate(slice_axes) if a == axis]
        if not idx:
            continue
        ex = dmap[axis] if axis in dmap else next(iter(dmap.values()))
        crops = crop_batch(ex.pixels, crop, len(idx), rng)
        for i, c in zip(idx, crops):
            out[i] = c
    return resize_bilinear(torch.stack(out), sched.resolution)


def synthesize(G, edge: int, rng, batch: int = 1) -> torch.Tensor:
    z = make_noise_pyramid(edge, G.noise_levels, G.noise_channels, rng, batch=batch)
    return G(z.levels)


def _check_finite(value: torch.Tensor, what: str, state: TrainState, **context) -> float:
    x = float(value.detach())
    if not math.isfinite(x):
        raise NonFiniteLossError(
            f"{what} is not finite ({x}) at iteration {state.iteration}",
            {"iteration": state.iteration, "what": what, "value": x, **context},
        )
    return x


def train_step(state: TrainState, exemplars) -> StepMetrics:
    """One iteration: every critic updated once, then the generator once at a random scale."""
    t0 = time.perf_counter()
    cfg = state.config
    dmap = direction_map(exemplars)
    if cfg.slicing == "oblique45" and not is_isotropic(dmap):
        raise ConfigError("45-degree slicing is only defined for isotropic exemplars")
    axes = list(dmap)
    sched = cfg.schedule
    G, D, rng = state.generator, state.discriminators, state.rng
    G.train()
    D.train()

    critic_losses = []
    for n in range(1, cfg.scales + 1):
        with torch.no_grad():
            volumes = synthesize(G, sched.crop_size(n), rng, cfg.generator_batch)
        fake = fake_slices(volumes, axes, cfg.critic_batch, cfg.slicing, rng)
        u = resize_bilinear(fake.pixels, cfg.resolution)
        x = real_patches(dmap, fake.axes, n, sched, rng)
        opt = state.critic_optimizers[n - 1]
        opt.zero_grad(set_to_none=True)
        loss = discriminator_loss(D.scorer(n), u, x, cfg.gp_weight, rng)
        critic_losses.append(_check_finite(loss, f"critic {n} loss", state, scale=n))
        loss.backward()
        opt.step()

    n_star = int(torch.randint(1, cfg.scales + 1, (1,), generator=rng))
    state.generator_optimizer.zero_grad(set_to_none=True)
    volumes = synthesize(G, sched.crop_size(n_star), rng, cfg.generator_batch)
    fake = fake_slices(volumes, axes, cfg.critic_batch, cfg.slicing, rng)
    g_loss = generator_loss(D.scorer(n_star), resize_bilinear(fake.pixels, cfg.resolution))
    g_value = _check_finite(g_loss, "generator loss", state, scale=n_star, critic_loss=critic_losses)
    g_loss.backward()
    state.generator_optimizer.step()
    # critic grads from the generator pass are stale; drop them
    for opt in state.critic_optimizers:
        opt.zero_grad(set_to_none=True)

    state.iteration += 1
    return StepMetrics(state.iteration, critic_losses, g_value, n_star, time.perf_counter() - t0)


def checkpoint_payload(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "generator": generator_archive(state.generator),
        "critics": {k: v.detach().clone() for k, v in state.discriminators.critics.state_dict().items()},
        "generator_optimizer": state.generator_optimizer.state_dict(),
        "critic_optimizers": [o.state_dict() for o in state.critic_optimizers],
        "rng": state.rng.get_state(),
        "front_end_checksum": state.front_end_checksum,
    }


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(checkpoint_payload(state), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config: TrainConfig | None = None, front_end: VGGFrontEnd | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``config`` may change only non-architecture keys."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise ConfigError(f"checkpoint format {found!r} does not match {CHECKPOINT_FORMAT!r}")
    saved = TrainConfig.from_dict(payload["config"])
    if config is None:
        config = saved
    mismatched = [k for k in _ARCH_KEYS if getattr(saved, k) != getattr(config, k)]
    if mismatched:
        raise ConfigError(f"checkpoint was trained with different {', '.join(mismatched)}")
    state = TrainState.create(config, front_end=front_end)
    if state.front_end_checksum != payload.get("front_end_checksum"):
        raise ConfigError("front-end weights differ from the ones the checkpoint was trained with")
    state.generator.load_state_dict(payload["generator"]["state"])
    state.discriminators.critics.load_state_dict(payload["critics"])
    state.generator_optimizer.load_state_dict(payload["generator_optimizer"])
    for opt, sd in zip(state.critic_optimizers, payload["critic_optimizers"]):
        opt.load_state_dict(sd)
    state.rng.set_state(payload["rng"])
    state.iteration = int(payload["iteration"])
    return state


def _write_diagnostics(out_dir: Path, state: TrainState, err: NonFiniteLossError) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "diagnostics.json").write_text(json.dumps(err.diagnostics, indent=2, sort_keys=True, default=str))
    save_checkpoint(state, out_dir / "diagnostics_checkpoint.pt")


def fit(
    config: TrainConfig,
    exemplars,
    out_dir=None,
    resume=None,
    state: TrainState | None = None,
    callback=None,
):
    """Run ``train_step`` until ``config.iterations``; returns ``(state, metrics)``.

    With ``out_dir`` set, appends records to ``metrics.jsonl`` and writes
    ``checkpoints/ckpt_<iteration>.pt`` every ``checkpoint_every`` steps plus
    ``checkpoints/latest.pt`` at the end. ``resume`` continues from a
    checkpoint path. ``callback(state, metrics)`` runs after every step.
    """
    dmap = direction_map(exemplars)
    if resume is not None:
        state = load_checkpoint(resume, config)
    elif state is None:
        state = TrainState.create(config)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        if resume is not None and log_path.exists():
            kept = [
                line
                for line in log_path.read_text().splitlines()
                if line.strip() and json.loads(line)["iteration"] <= state.iteration
            ]
            log_path.write_text("".join(line + "\n" for line in kept))
        elif resume is None:
            log_path.write_text("")
        if state.iteration == 0:
            save_checkpoint(state, out / "checkpoints" / "ckpt_0000000.pt")

    metrics = []
    handle = open(log_path, "a") if log_path is not None else None
    try:
        while state.iteration < config.iterations:
            try:
                m = train_step(state, dmap)
            except NonFiniteLossError as err:
                log.error("aborting: %s", err)
                if out is not None:
                    _write_diagnostics(out, state, err)
                raise
            metrics.append(m)
            if handle is not None:
                handle.write(json.dumps(m.record(), sort_keys=True) + "\n")
                handle.flush()
            if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"ckpt_{state.iteration:07d}.pt")
            if callback is not None:
                callback(state, m)
    finally:
        if handle is not None:
            handle.close()
    if out is not None:
        save_checkpoint(state, out / "checkpoints" / "latest.pt")
    return state, metrics


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
