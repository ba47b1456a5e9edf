"""Command-line entry point: ``solidtex {train,synth,slice,export,eval,ablate}``.

Exit codes: 0 success, 2 configuration/validation, 3 runtime/numerical, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import torch
import yaml

from solidtex.errors import ConfigError, FormatError, NonFiniteLossError, ValidationError
from solidtex.evaluation import (
    DEFAULT_BINS,
    DEFAULT_SLICES,
    ablate_scales,
    ablate_slicing,
    evaluate_generator,
    evaluate_slices,
    evaluate_volume,
    slicing_gap,
)
from solidtex.exemplar import DIRECTIONS, Exemplar, load_exemplar
from solidtex.generator import check_volume_edge, load_generator, make_noise_pyramid
from solidtex.slicer import AXES, slice_at, slice_oblique45
from solidtex.trainer import TrainConfig, fit
from solidtex.volume_io import export_slice_stack, load_volume, save_volume, slice_image

log = logging.getLogger("solidtex")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

# non-training keys accepted in a run config
RUN_KEYS = {
    "exemplar": "path of an isotropic exemplar",
    "exemplars": "mapping of axis (X, Y, Z or ALL) to exemplar path",
    "output_dir": "directory for checkpoints, metrics and reports",
    "eval_bins": "histogram bins for the final report",
    "eval_slices": "number of slices scored in the final report",
    "log_every": "iterations between progress log lines",
}


class RunConfig:
    """A validated run configuration file.

    ``train`` is the :class:`TrainConfig`; ``exemplar_paths`` maps direction
    labels to image paths.
    """

    def __init__(self, train, exemplar_paths, output_dir, eval_bins, eval_slices, log_every, source):
        self.train = train
        self.exemplar_paths = exemplar_paths
        self.output_dir = output_dir
        self.eval_bins = eval_bins
        self.eval_slices = eval_slices
        self.log_every = log_every
        self.source = source

    def exemplars(self) -> list[Exemplar]:
        return [load_exemplar(p, d) for d, p in self.exemplar_paths.items()]


def _train_field_checks() -> dict:
    checks = {}
    for f in fields(TrainConfig):
        default = f.default
        if isinstance(default, bool):
            checks[f.name] = ("a boolean", lambda v: isinstance(v, bool))
        elif isinstance(default, int):
            checks[f.name] = ("an integer", lambda v: isinstance(v, int) and not isinstance(v, bool))
        elif isinstance(default, float):
            checks[f.name] = (
                "a number",
                lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            )
        elif isinstance(default, tuple):
            checks[f.name] = (
                "a list of numbers",
                lambda v: isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v),
            )
        else:
            checks[f.name] = ("a string", lambda v: v is None or isinstance(v, str))
    return checks


def _key_lines(text: str) -> dict:
    node = yaml.compose(text)
    if node is None or not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and fully validate a YAML run config; every problem names its key and line."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    try:
        data = yaml.safe_load(text) or {}
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    def where(key):
        line = lines.get(key)
        return f"{path}:{line}: key '{key}'" if line else f"{path}: key '{key}'"

    checks = _train_field_checks()
    for key in data:
        if key not in checks and key not in RUN_KEYS:
            raise ConfigError(f"{where(key)}: unknown key")
    for key, (kind, ok) in checks.items():
        if key in data and not ok(data[key]):
            raise ConfigError(f"{where(key)}: expected {kind}, got {data[key]!r}")

    if "exemplar" in data and "exemplars" in data:
        raise ConfigError(f"{where('exemplars')}: give either 'exemplar' or 'exemplars', not both")
    if "exemplar" in data:
        if not isinstance(data["exemplar"], str):
            raise ConfigError(f"{where('exemplar')}: expected a path string")
        paths = {"ALL": data["exemplar"]}
        key = "exemplar"
    elif "exemplars" in data:
        paths = data["exemplars"]
        key = "exemplars"
        if not isinstance(paths, dict) or not paths:
            raise ConfigError(f"{where(key)}: expected a mapping of axis to path")
        for d, p in paths.items():
            if d not in DIRECTIONS or not isinstance(p, str):
                raise ConfigError(f"{where(key)}: entry {d!r}: {p!r} must map one of {DIRECTIONS} to a path")
        if "ALL" in paths and len(paths) > 1:
            raise ConfigError(f"{where(key)}: 'ALL' cannot be combined with per-axis exemplars")
        if "ALL" not in paths and len(paths) < 2:
            raise ConfigError(f"{where(key)}: anisotropic runs need exemplars for at least two axes")
    else:
        raise ConfigError(f"{path}: missing required key 'exemplar' (or 'exemplars')")
    base = path.parent
    resolved = {}
    for d, p in paths.items():
        full = Path(p) if Path(p).is_absolute() else base / p
        if not full.is_file():
            raise ConfigError(f"{where(key)}: exemplar file not found: {p}")
        resolved[d] = str(full)

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    output_dir = overrides.pop("output_dir", None) or data.get("output_dir")
    if output_dir is None:
        raise ConfigError(f"{path}: missing required key 'output_dir'")
    if not isinstance(output_dir, str):
        raise ConfigError(f"{where('output_dir')}: expected a path string")
    output = Path(output_dir) if Path(output_dir).is_absolute() or "output_dir" not in data else base / output_dir
    for key in ("eval_bins", "eval_slices", "log_every"):
        if key in data and (not isinstance(data[key], int) or isinstance(data[key], bool) or data[key] < 1):
            raise ConfigError(f"{where(key)}: expected a positive integer")

    train_values = {k: data[k] for k in checks if k in data}
    train_values.update(overrides)
    if train_values.get("front_end_weights"):
        fe = Path(train_values["front_end_weights"])
        train_values["front_end_weights"] = str(fe if fe.is_absolute() else base / fe)
    try:
        train = TrainConfig(**train_values)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(
        train,
        resolved,
        output,
        data.get("eval_bins", DEFAULT_BINS),
        data.get("eval_slices", DEFAULT_SLICES),
        data.get("log_every", 100),
        path,
    )


def _progress(every):
    def callback(state, m):
        if every and state.iteration % every == 0:
            log.info(
                "iter %d  critic %s  generator %.4f  scale %d",
                m.iteration,
                " ".join(f"{c:.4f}" for c in m.critic_loss),
                m.generator_loss,
                m.scale,
            )

    return callback


def cmd_train(args) -> int:
    run = load_run_config(
        args.config, {"iterations": args.iterations, "seed": args.seed, "output_dir": args.output_dir}
    )
    exemplars = run.exemplars()
    state, _ = fit(run.train, exemplars, out_dir=run.output_dir, resume=args.resume, callback=_progress(run.log_every))
    report = evaluate_generator(
        state.generator,
        exemplars,
        run.train.resolution,
        run.train.seed,
        run.eval_bins,
        run.eval_slices,
        run.train.to_dict(),
    )
    report.save(run.output_dir / "eval_report.json")
    log.info("histogram distance %.4f  continuity %.4f", report.histogram_distance, report.continuity)
    return EXIT_OK


@torch.no_grad()
def synthesize_volume(G, size: int, seed: int) -> torch.Tensor:
    check_volume_edge(size, G.noise_levels)
    G.eval()
    z = make_noise_pyramid(size, G.noise_levels, G.noise_channels, torch.Generator().manual_seed(seed))
    return G(z.levels)[0]


def cmd_synth(args) -> int:
    G = load_generator(args.checkpoint)
    v = synthesize_volume(G, args.size, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(v, out)
    log.info("wrote %d^3 volume to %s", args.size, out)
    return EXIT_OK


def cmd_slice(args) -> int:
    v = load_volume(args.volume)
    if args.axis == "OBLIQUE45":
        s = slice_oblique45(v, args.rotation_axis, args.offset)
    else:
        if args.index is None:
            raise ValidationError("--index is required for orthogonal slices")
        s = slice_at(v, args.axis, args.index)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    slice_image(s).save(out)
    return EXIT_OK


def cmd_export(args) -> int:
    count = export_slice_stack(load_volume(args.volume), args.axis, args.out_dir)
    log.info("wrote %d slices to %s", count, args.out_dir)
    return EXIT_OK


def _parse_exemplar_args(values) -> list[Exemplar]:
    out = []
    for item in values:
        direction, sep, p = item.partition("=")
        if not sep:
            direction, p = "ALL", item
        if direction not in DIRECTIONS:
            raise ValidationError(f"--exemplar {item!r}: direction must be one of {DIRECTIONS}")
        out.append(load_exemplar(p, direction))
    return out


def _load_image_dir(path) -> list[torch.Tensor]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise FileNotFoundError(f"no images in {path}")
    return [load_exemplar(f).pixels for f in files]


def cmd_eval(args) -> int:
    exemplars = _parse_exemplar_args(args.exemplar)
    meta = {"bins": args.bins}
    if args.volume:
        report = evaluate_volume(load_volume(args.volume), exemplars, args.bins, args.num_slices, args.seed)
    elif args.checkpoint:
        G = load_generator(args.checkpoint)
        check_volume_edge(args.size, G.noise_levels)
        report = evaluate_generator(G, exemplars, args.size, args.seed, args.bins, args.num_slices)
    else:
        if len(exemplars) != 1:
            raise ValidationError("--slices compares against exactly one exemplar")
        report = evaluate_slices(_load_image_dir(args.slices), exemplars[0], args.bins, meta)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _scale_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("need at least one scale count")
    return values


def cmd_ablate(args) -> int:
    run = load_run_config(
        args.config, {"iterations": args.iterations, "seed": args.seed, "output_dir": args.output_dir}
    )
    exemplars = run.exemplars()
    out = run.output_dir
    out.mkdir(parents=True, exist_ok=True)
    kw = {"bins": run.eval_bins, "slices": run.eval_slices}
    if args.scales:
        for n in args.scales:
            # validate every scale count before spending compute on any of them
            replace(run.train, scales=n)
        reports = ablate_scales(run.train, exemplars, args.scales, out_dir=out, **kw)
        for n, r in zip(args.scales, reports):
            r.save(out / f"report_scales_{n}.json")
            log.info("scales=%d  histogram distance %.4f", n, r.histogram_distance)
    if args.slicing:
        ortho, oblique = ablate_slicing(run.train, exemplars, out_dir=out, **kw)
        ortho.save(out / "report_slicing_orthogonal.json")
        oblique.save(out / "report_slicing_oblique45.json")
        gap = slicing_gap(ortho, oblique)
        (out / "slicing_gap.json").write_text(json.dumps(gap, indent=2, sort_keys=True) + "\n")
        log.info("slicing gap %s", gap)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="solidtex", description="Solid texture synthesis from 2D exemplars.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator from a run config")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--output-dir", help="override the output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a volume file from a checkpoint")
    p.add_argument("checkpoint", help="training checkpoint or generator archive")
    p.add_argument("--size", type=int, required=True, help="volume edge in voxels")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--out", required=True, help="output .stsv path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("slice", help="write one slice of a volume file as PNG")
    p.add_argument("volume", help="input .stsv file")
    p.add_argument("--axis", required=True, choices=[*AXES, "OBLIQUE45"])
    p.add_argument("--index", type=int, help="slice index for X/Y/Z")
    p.add_argument("--rotation-axis", choices=AXES, default="X", help="for OBLIQUE45 (default X)")
    p.add_argument("--offset", type=float, default=0.0, help="for OBLIQUE45: plane offset in voxels")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("export", help="write every slice along an axis as PNGs")
    p.add_argument("volume", help="input .stsv file")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--out-dir", required=True, help="directory for slice_NNN.png files")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="score a volume, checkpoint, or image set against exemplars")
    p.add_argument(
        "--exemplar",
        action="append",
        required=True,
        help="exemplar image, optionally AXIS=path for anisotropic sets (repeatable)",
    )
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--volume", help="input .stsv file")
    src.add_argument("--checkpoint", help="checkpoint to synthesize from")
    src.add_argument("--slices", help="directory of slice images")
    p.add_argument("--size", type=int, default=32, help="volume edge with --checkpoint (default 32)")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help=f"histogram bins (default {DEFAULT_BINS})")
    p.add_argument("--num-slices", type=int, default=DEFAULT_SLICES, help=f"slices sampled (default {DEFAULT_SLICES})")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the scale-count or slicing ablation")
    p.add_argument("config", help="YAML run config")
    p.add_argument("--scales", type=_scale_list, help="comma-separated scale counts, e.g. 1,3,5")
    p.add_argument("--slicing", action="store_true", help="compare orthogonal and +45-degree slicing")
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--seed", type=int, help="override the random seed")
    p.add_argument("--output-dir", help="override the output directory")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s"
    )
    if args.command == "ablate" and not (args.scales or args.slicing):
        parser.error("ablate needs --scales and/or --slicing")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
