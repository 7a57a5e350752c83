import numpy as np
import pytest
from hypothesis import settings

from tokenvc.codec import DESK_GEOMETRY, fit_codebook
from tokenvc.frames import SynthConfig, synth_sequence

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture(scope="session")
def scene_frames():
    return synth_sequence(SynthConfig.random(1), 60)


@pytest.fixture(scope="session")
def small_codebook(scene_frames):
    return fit_codebook(scene_frames[:40], 64, DESK_GEOMETRY, max_iters=15, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` get one PASS/FAIL line in
# the terminal summary, in criterion order.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[num] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[num]
        line = f"{verdict} criterion {num:2d}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
