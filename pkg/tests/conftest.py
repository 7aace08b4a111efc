import sys

import numpy as np
import pytest

from vqaudit.tileworld import generate_episodes
from vqaudit.vqcodec import build_model, build_oracle_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def episodes():
    return generate_episodes(seed=7, episodes=3, steps=6)


@pytest.fixture(scope="session")
def oracle():
    return build_oracle_model()


@pytest.fixture
def small_model():
    return build_model(K=8, d=4, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        name, ok, seconds, detail = results[number]
        terminalreporter.write_line(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}")
