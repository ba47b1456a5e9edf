import numpy as np
import pytest
import torch
from PIL import Image

from solidtex.discriminators import _vgg19_blocks

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(name, passed, detail)``."""

    def record(name, passed, detail=""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def write_png(tmp_path):
    def write(array, name="img.png", mode=None):
        path = tmp_path / name
        Image.fromarray(np.asarray(array), mode=mode).save(path)
        return path

    return write


@pytest.fixture(scope="session")
def vgg_asset(tmp_path_factory):
    """A stand-in weight file with the VGG-19 layout (seeded random init)."""
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("assets") / "vgg19_features.pth"
    torch.save({f"features.{k}": v for k, v in _vgg19_blocks().state_dict().items()}, path)
    return path
