from __future__ import annotations

import numpy as np
import pytest

ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        prev = ACCEPTANCE_RESULTS.get(n, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        ACCEPTANCE_RESULTS[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, status = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_mask(rng: np.random.Generator, h: int, w: int, density: float | None = None) -> np.ndarray:
    if density is None:
        density = rng.uniform(0.0, 1.0)
    kind = rng.integers(4)
    if kind == 0:
        return rng.random((h, w)) < density
    if kind == 1:
        m = np.zeros((h, w), dtype=bool)
        r0, c0 = rng.integers(0, h), rng.integers(0, w)
        r1, c1 = rng.integers(r0, h + 1), rng.integers(c0, w + 1)
        m[r0:r1, c0:c1] = True
        return m
    if kind == 2:
        return np.zeros((h, w), dtype=bool)
    return np.ones((h, w), dtype=bool)


def square(h: int, w: int, top: int, left: int, size: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[top:top + size, left:left + size] = True
    return m


def scenario_inputs(scenario, name="synth"):
    """In-memory pipeline inputs for a synthetic scenario."""
    from mots_refine.pipeline import VideoInputs

    return VideoInputs(name, list(scenario.detections), scenario.embeddings, scenario.flows,
                       gt_labels=list(scenario.labels))
