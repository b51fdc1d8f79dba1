import os

import numpy as np
import pytest

from diaforge.diffusion import build_schedule
from diaforge.harness import BenchConfig, build_models
from diaforge.models import IdentityCodec, make_toy_dataset, train_denoiser
from diaforge.numerics import Rng

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_BENCH = os.path.join(ROOT, "configs", "bench_default.json")

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def pixel_training(schedule):
    """Pixel-space MLP trained on the toy set (identity codec), with its loss history."""
    history = []
    den = train_denoiser(make_toy_dataset(2048, 8, 1), schedule, 100, Rng(3), history=history)
    return {"denoiser": den, "codec": IdentityCodec((8, 8)), "history": history, "seed": 3}


@pytest.fixture(scope="session")
def pixel_model(pixel_training):
    return pixel_training["denoiser"], pixel_training["codec"]


@pytest.fixture(scope="session")
def bench_config():
    return BenchConfig.load(DEFAULT_BENCH)


@pytest.fixture(scope="session")
def latent_models(bench_config):
    """Linear codec + latent MLP exactly as the default benchmark builds them."""
    return build_models(bench_config)


@pytest.fixture(scope="session")
def eval_images():
    return make_toy_dataset(64, 8, 42)


@pytest.fixture
def rng():
    return Rng(12345)


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
