"""Shared fixtures and the acceptance-criteria summary printed after a run."""

import numpy as np
import pytest

from fmapkit.mesh import Mesh, normalize_mesh
from fmapkit.spectral import mesh_basis
from fmapkit.synthetic import bumpy, icosphere, jitter_radial

_ACCEPTANCE = {}  # nodeid -> {"outcome", "duration"}
_TITLES = {}  # nodeid -> (number, title)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.nodeid not in _TITLES:
        return
    result = _ACCEPTANCE.setdefault(report.nodeid, {"outcome": "passed", "duration": 0.0})
    result["duration"] += report.duration
    if report.failed:
        result["outcome"] = "failed"
    elif report.skipped and result["outcome"] == "passed":
        result["outcome"] = "skipped"


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _TITLES[item.nodeid] = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    rows = sorted((*_TITLES[nid], res) for nid, res in _ACCEPTANCE.items())
    for number, title, res in rows:
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[res["outcome"]]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({res['duration']:.1f} s)")


# ---------------------------------------------------------------------------
# Geometry fixtures


@pytest.fixture
def tetrahedron():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f)


@pytest.fixture(scope="session")
def sphere2():
    return icosphere(2)


@pytest.fixture(scope="session")
def blob():
    """Asymmetric unit-area blob (162 vertices) with a 20-function basis."""
    mesh = normalize_mesh(bumpy(icosphere(2), np.random.default_rng(3)))
    return mesh, mesh_basis(mesh, 20)


@pytest.fixture(scope="session")
def permuted_pair():
    """Jittered sphere M, and N = vertex-permuted copy; ``perm`` is the GT N->M map."""
    rng = np.random.default_rng(11)
    m = normalize_mesh(jitter_radial(icosphere(3), 0.1, rng))
    perm = rng.permutation(m.n_vertices)
    n = m.permuted(perm)
    return m, n, perm, mesh_basis(m, 40), mesh_basis(n, 40)
