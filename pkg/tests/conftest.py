from __future__ import annotations

import numpy as np
import pytest

from fedincr.engine import Variant
from fedincr.nn import ArchDescriptor, build_network
from fedincr.package import ModelPackage
from fedincr.server.validation import ValidationCase, ValidationSet
from fedincr.sim.phantoms import PhantomSpec, generate_phantom
from fedincr.sim.pretrain import DEFAULT_LABELS, pretrain

FIXED_TIME = "2021-01-01T00:00:00Z"


def make_package(desc=None, seed=0, version=0, task="leg", created_at=FIXED_TIME) -> ModelPackage:
    desc = desc or ArchDescriptor()
    return ModelPackage(task, version, None, desc, DEFAULT_LABELS[: desc.n_classes], build_network(desc, seed), created_at)


def phantoms(profile: str, seeds) -> list:
    return [generate_phantom(PhantomSpec(profile=profile), s) for s in seeds]


@pytest.fixture(scope="session")
def small_desc() -> ArchDescriptor:
    return ArchDescriptor(input_size=(16, 16), n_classes=3, encoder_channels=(2, 3, 4), n_levels=2)


@pytest.fixture(scope="session")
def validation_data():
    """The default phantom validation library: 10 profile-A phantoms."""
    return phantoms("profile-A", range(5000, 5010))


@pytest.fixture(scope="session")
def validation_set(validation_data) -> ValidationSet:
    return ValidationSet(ValidationCase(s, g, Variant.LEFT, f"val{i}") for i, (s, g) in enumerate(validation_data))


@pytest.fixture(scope="session")
def pretrained() -> ModelPackage:
    """Version-0 model trained on 20 profile-A phantoms (a few seconds)."""
    pkg, score = pretrain(ArchDescriptor(), phantoms("profile-A", range(1000, 1020)), epochs=200, seed=0)
    assert score >= 0.85
    return pkg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(name, ok, detail)`` prints one pass/fail line and asserts ``ok``."""

    def report(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
