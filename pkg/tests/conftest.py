import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fixedsgld import GaussianConjugateModel, generate_logistic_data  # noqa: E402


@pytest.fixture
def small_toy():
    return GaussianConjugateModel(1.0, 0.5, np.array([0.3, -1.2, 2.0, 0.7, 1.1]))


@pytest.fixture
def small_logistic():
    return generate_logistic_data(40, 3, seed=11)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def report(request):
    """Record one pass/fail line per acceptance criterion."""

    def emit(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        request.config._acceptance_lines.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
