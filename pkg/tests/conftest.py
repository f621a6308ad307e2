import numpy as np
import pytest

from scod.distributions import (
    GaussianClassConditional,
    LabeledMixtureDistribution,
    ScodEnvironment,
    TruncatedGaussian,
    UniformBox,
    open_set_restrict,
)


def gaussian_env_1d(pi_mix=0.5, pi_star=0.5):
    """Two classes N(-2,1), N(2,1) with outlier N(4,1)."""
    inlier = LabeledMixtureDistribution(
        [0.5, 0.5], [GaussianClassConditional([-2.0], 1.0), GaussianClassConditional([2.0], 1.0)]
    )
    return ScodEnvironment(inlier, GaussianClassConditional([4.0], 1.0), pi_star, pi_mix, "gauss-1d")


def truncated_env_2d(pi_mix=0.1, pi_star=0.5):
    inlier = LabeledMixtureDistribution(
        [0.5, 0.5], [GaussianClassConditional([-1.5, 0.0], 1.0), GaussianClassConditional([1.5, 0.0], 1.0)]
    )
    outlier = TruncatedGaussian([0.0, 3.5], 1.0, axis=1, bound=1.5, side="above")
    return ScodEnvironment(inlier, outlier, pi_star, pi_mix, "truncated-2d")


def open_set_env():
    full = LabeledMixtureDistribution(
        [0.25] * 4,
        [GaussianClassConditional(m, 1.0) for m in ([0.0, 0.0], [2.0, 0.0], [1.0, 1.7], [5.0, 0.0])],
    )
    return full, open_set_restrict(full, 3, pi_mix=0.5)


def uniform_env_1d():
    inlier = LabeledMixtureDistribution(
        [0.5, 0.5], [GaussianClassConditional([-2.0], 1.0), GaussianClassConditional([2.0], 1.0)]
    )
    return ScodEnvironment(inlier, UniformBox([-8.0], [8.0]), 0.5, 0.5, "uniform-1d")


@pytest.fixture
def env1d():
    return gaussian_env_1d()


@pytest.fixture
def env2d():
    return truncated_env_2d()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_RESULTS[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
