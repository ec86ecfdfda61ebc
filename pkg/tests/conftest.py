import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")

from surgformer.mesh import generate_bar_mesh, make_mesh  # noqa: E402


@pytest.fixture
def unit_tet():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return make_mesh(v, [[0, 1, 2, 3]], [])


@pytest.fixture
def small_bar():
    return generate_bar_mesh(2, 2, 2, (2.0, 1.0, 1.0))


@pytest.fixture
def eight_node_mesh():
    return generate_bar_mesh(1, 1, 1, (1.0, 1.0, 1.0))


def random_mesh(rng, max_nodes=200):
    """Jittered structured bar with random dimensions, at most ``max_nodes`` vertices."""
    while True:
        nx, ny, nz = rng.integers(1, 7, size=3)
        if (nx + 1) * (ny + 1) * (nz + 1) <= max_nodes:
            break
    m = generate_bar_mesh(int(nx), int(ny), int(nz), tuple(rng.uniform(0.5, 2.0, size=3)))
    h = np.array(m.vertices.max(axis=0) / np.array([nx, ny, nz]))
    v = m.vertices + rng.uniform(-0.15, 0.15, size=m.vertices.shape) * h
    return make_mesh(v, m.tets, m.fixed_nodes)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
