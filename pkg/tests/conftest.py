import numpy as np
import pytest
import torch

from ssat.predictor import ModelConfig, PredictorModel
from ssat.scenario import TEMPLATES, generate_synthetic_scene

SMALL = ModelConfig(feature_width=16, latent_other_width=4, conv_channels=4, neighbor_width=4,
                    encoder_hidden=12, decoder_hidden=12, disc_hidden=8)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return PredictorModel(SMALL, seed=3)


@pytest.fixture(scope="session")
def scenes():
    return [generate_synthetic_scene(seed, t) for seed in range(4) for t in TEMPLATES]


def straight_truth(n=30, speed=1.0):
    return np.stack([np.arange(n) * speed, np.zeros(n)], axis=1)


# acceptance criteria record their verdicts here; printed once at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
