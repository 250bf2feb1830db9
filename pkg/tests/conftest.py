import os
import sys

import numpy as np
import pytest
import torch
from scipy import ndimage

sys.path.insert(0, os.path.dirname(__file__))

from cgqr.data import SynthConfig, generate_synthetic, preprocess  # noqa: E402
from cgqr.encoder import EncoderConfig  # noqa: E402
from cgqr.model import ModelConfig  # noqa: E402


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        n_classes=3,
        image_size=(32, 32),
        encoder=EncoderConfig(branch_channels=(4, 8, 8), branch_strides=(4, 8, 16), n_stages=1),
        embed_dim=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


def random_mask(rng, max_side=16, n_classes=3):
    """Smoothed-noise label map with 4..max_side rows and columns."""
    h, w = (int(v) for v in rng.integers(4, max_side + 1, 2))
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(0.6, 1.8))
    cuts = np.quantile(field, np.sort(rng.uniform(0.2, 0.95, n_classes)))
    return np.digitize(field, cuts).astype(np.int64)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def synth_raw():
    return generate_synthetic(SynthConfig(n_patients=3, frames_per_patient=2, image_size=(32, 32), seed=3))


@pytest.fixture(scope="session")
def synth_samples(synth_raw):
    return [preprocess(r, (32, 32)) for r in synth_raw]


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture(scope="session")
def overfit_runs(tmp_path_factory):
    """synth 4x4 frames at 64x64, then 200-epoch desk training: full and no_contour_queries.

    Returns a dict with the dataset root, run directories and wall-clock seconds.
    """
    import time

    from cgqr.cli import run

    root = tmp_path_factory.mktemp("overfit")
    data = root / "data"
    assert run(["synth", "--patients", "4", "--frames", "4", "--classes", "3", "--image-size", "64",
                "--seed", "0", "--out", str(data)]) == 0
    out = {"data": data}
    for name, extra in (("full", []), ("no_contour_queries", ["--ablate", "no_contour_queries"])):
        start = time.perf_counter()
        code = run(["train", "--data", str(data), "--out", str(root / name), "--profile", "desk",
                    "--epochs", "200", "--tf-epochs", "40", "--seed", "0", "--val-on-train", *extra])
        out[name + "_seconds"] = time.perf_counter() - start
        assert code == 0
        out[name] = root / name
    return out


# -- acceptance reporting: one PASS/FAIL line per criterion ----------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.failed or report.when == "call":
        prev = _CRITERIA.get(number, (title, True))[1]
        _CRITERIA[number] = (title, prev and not report.failed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
