import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from solidtex.cli import build_parser, load_run_config, main
from solidtex.errors import ConfigError
from solidtex.slicer import slice_at
from solidtex.volume_io import load_volume, quantize
from textures import blob_array

GOLDEN = Path(__file__).parent / "golden"
SUBCOMMANDS = ("train", "synth", "slice", "export", "eval", "ablate")


def write_config(tmp_path, name="run.yaml", **overrides):
    Image.fromarray(blob_array(32)).save(tmp_path / "ex.png")
    cfg = {
        "exemplar": "ex.png",
        "output_dir": "out",
        "scales": 1,
        "noise_levels": 3,
        "resolution": 16,
        "generator_width": 4,
        "critic_width": 4,
        "critic_batch": 4,
        "noise_channels": 2,
        "front_end_enabled": False,
        "iterations": 2,
        "checkpoint_every": 1,
        "eval_slices": 8,
    }
    cfg.update(overrides)
    cfg = {k: v for k, v in cfg.items() if v is not None}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg, sort_keys=False))
    return path


@pytest.fixture
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root)
    assert main(["train", str(cfg), "--iterations", "1"]) == 0
    return root / "out"


def test_missing_exemplar_names_key(tmp_path, capsys):
    cfg = write_config(tmp_path, exemplar="nowhere.png")
    assert main(["train", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "'exemplar'" in err and "nowhere.png" in err
    assert f"{cfg}:1:" in err  # line of the offending key


def test_unknown_key_is_line_precise(tmp_path, capsys):
    cfg = write_config(tmp_path)
    cfg.write_text(cfg.read_text() + "learning_rate: 0.1\n")
    assert main(["train", str(cfg)]) == 2
    err = capsys.readouterr().err
    n = len(cfg.read_text().splitlines())
    assert f"{cfg}:{n}: key 'learning_rate': unknown key" in err


def test_wrong_type_is_reported(tmp_path):
    cfg = write_config(tmp_path, scales="two")
    with pytest.raises(ConfigError, match="key 'scales': expected an integer"):
        load_run_config(cfg)


def test_invalid_values_rejected_before_compute(tmp_path, capsys):
    cfg = write_config(tmp_path, resolution=18)  # 18 not divisible by 4 for K=3
    assert main(["train", str(cfg)]) == 2
    assert not (tmp_path / "out").exists()


def test_flags_override_file(tmp_path):
    cfg = write_config(tmp_path)
    run = load_run_config(cfg, {"iterations": 9, "seed": 4, "output_dir": str(tmp_path / "elsewhere")})
    assert (run.train.iterations, run.train.seed) == (9, 4)
    assert run.output_dir == tmp_path / "elsewhere"
    assert load_run_config(cfg).output_dir == tmp_path / "out"


def test_anisotropic_config(tmp_path):
    cfg = write_config(tmp_path, exemplar=None, exemplars={"X": "ex.png", "Z": "ex.png"})
    run = load_run_config(cfg)
    assert set(run.exemplar_paths) == {"X", "Z"}
    assert [e.direction for e in run.exemplars()] == ["X", "Z"]
    with pytest.raises(ConfigError, match="at least two"):
        load_run_config(write_config(tmp_path, "b.yaml", exemplar=None, exemplars={"X": "ex.png"}))


def test_zero_iterations_writes_initial_checkpoint(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", str(cfg), "--iterations", "0"]) == 0
    out = tmp_path / "out"
    assert (out / "checkpoints" / "ckpt_0000000.pt").is_file()
    report = json.loads((out / "eval_report.json").read_text())
    assert np.isfinite(report["histogram_distance"])


def test_seed_determinism(tmp_path):
    cfg = write_config(tmp_path)
    logs = []
    for name in ("a", "b"):
        assert main(["train", str(cfg), "--seed", "7", "--output-dir", str(tmp_path / name)]) == 0
        records = [json.loads(l) for l in (tmp_path / name / "metrics.jsonl").read_text().splitlines()]
        logs.append([{k: v for k, v in r.items() if k != "wall_time"} for r in records])
        assert len(records) == 2
    assert logs[0] == logs[1]


def test_synth_sizes_and_determinism(trained, tmp_path, capsys):
    ckpt = trained / "checkpoints" / "latest.pt"
    a, b = tmp_path / "a.stsv", tmp_path / "b.stsv"
    assert main(["synth", str(ckpt), "--size", "64", "--seed", "3", "--out", str(a)]) == 0
    assert main(["synth", str(ckpt), "--size", "64", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert load_volume(a).shape == (3, 64, 64, 64)
    assert main(["synth", str(ckpt), "--size", "66", "--out", str(tmp_path / "c.stsv")]) == 2
    assert "divisible by 4" in capsys.readouterr().err
    assert not (tmp_path / "c.stsv").exists()


def test_slice_and_export(trained, tmp_path):
    vol = tmp_path / "v.stsv"
    assert main(["synth", str(trained / "checkpoints" / "latest.pt"), "--size", "8", "--out", str(vol)]) == 0
    v = load_volume(vol)
    png = tmp_path / "s.png"
    assert main(["slice", str(vol), "--axis", "Z", "--index", "0", "--out", str(png)]) == 0
    with Image.open(png) as img:
        px = torch.from_numpy(np.asarray(img).astype(np.float32) / 255).permute(2, 0, 1)
    assert torch.equal(px, slice_at(v, "Z", 0))
    assert main(["slice", str(vol), "--axis", "OBLIQUE45", "--rotation-axis", "Y", "--out", str(tmp_path / "o.png")]) == 0
    assert main(["slice", str(vol), "--axis", "Z", "--out", str(png)]) == 2  # no index
    assert main(["slice", str(vol), "--axis", "Z", "--index", "8", "--out", str(png)]) == 2
    assert main(["export", str(vol), "--axis", "X", "--out-dir", str(tmp_path / "stack")]) == 0
    assert len(list((tmp_path / "stack").glob("slice_*.png"))) == 8


def test_io_errors_exit_4(tmp_path):
    bad = tmp_path / "bad.stsv"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    assert main(["export", str(bad), "--axis", "X", "--out-dir", str(tmp_path / "s")]) == 4
    assert main(["export", str(tmp_path / "missing.stsv"), "--axis", "X", "--out-dir", str(tmp_path / "s")]) == 4


def test_eval_self_crops_near_zero(tmp_path):
    ex = blob_array(128, blobs=600, radius=(1.5, 3))
    Image.fromarray(ex).save(tmp_path / "ex.png")
    crops = tmp_path / "crops"
    crops.mkdir()
    rng = np.random.default_rng(0)
    for i in range(64):
        t, l = rng.integers(0, 97, 2)
        Image.fromarray(ex[t : t + 32, l : l + 32]).save(crops / f"c{i:02d}.png")
    out = tmp_path / "report.json"
    assert main(["eval", "--exemplar", str(tmp_path / "ex.png"), "--slices", str(crops), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["histogram_distance"] < 0.05
    assert report["continuity"] is None


def test_eval_volume_and_checkpoint(trained, tmp_path, capsys):
    ex = trained.parent / "ex.png"
    vol = tmp_path / "v.stsv"
    main(["synth", str(trained / "checkpoints" / "latest.pt"), "--size", "16", "--out", str(vol)])
    assert main(["eval", "--exemplar", str(ex), "--volume", str(vol), "--num-slices", "8"]) == 0
    a = json.loads(capsys.readouterr().out)
    assert set(a["per_axis"]) == {"X", "Y", "Z"} and a["continuity"] >= 0
    args = ["eval", "--exemplar", f"X={ex}", "--exemplar", f"Y={ex}", "--checkpoint", str(trained / "checkpoints" / "latest.pt"), "--size", "16"]
    assert main(args) == 0
    b = json.loads(capsys.readouterr().out)
    assert "histogram_distance" in b["per_axis"]["X"] and "histogram_distance" not in b["per_axis"]["Z"]
    assert main(["eval", "--exemplar", f"W={ex}", "--volume", str(vol)]) == 2


def test_ablate_writes_reports(tmp_path):
    cfg = write_config(tmp_path, noise_levels=1, resolution=16)
    assert main(["ablate", str(cfg), "--scales", "1,2", "--slicing", "--iterations", "1"]) == 0
    out = tmp_path / "out"
    for name in ("report_scales_1.json", "report_scales_2.json", "report_slicing_orthogonal.json", "report_slicing_oblique45.json"):
        report = json.loads((out / name).read_text())
        assert np.isfinite(report["histogram_distance"])
    gap = json.loads((out / "slicing_gap.json").read_text())
    assert set(gap) == {"histogram_distance_gap", "continuity_gap"}


def test_ablate_validates_all_scale_counts_first(tmp_path):
    cfg = write_config(tmp_path, noise_levels=1, resolution=16)
    # five scales would need a 16 / 2**4 = 1 px crop
    assert main(["ablate", str(cfg), "--scales", "1,5", "--iterations", "1"]) == 2
    assert not (tmp_path / "out" / "scales_1").exists()


def test_ablate_needs_a_protocol(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", str(write_config(tmp_path))])
    assert exc.value.code == 2


def render_help(command, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    parser = build_parser()
    if command is None:
        return parser.format_help()
    sub = next(a for a in parser._actions if a.dest == "command")
    return sub.choices[command].format_help()


@pytest.mark.parametrize("command", [None, *SUBCOMMANDS])
def test_help_matches_golden(command, monkeypatch):
    text = render_help(command, monkeypatch)
    golden = GOLDEN / f"help_{command or 'main'}.txt"
    assert text == golden.read_text()
