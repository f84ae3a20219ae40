import numpy as np
import pytest

from anisostokes.mesh import REF_CORNERS, EDGE_CORNERS, build_alternating_mesh, build_quad_grid

# acceptance results, printed at the end of the run
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def patch_nodes(params: dict) -> np.ndarray:
    """Nine nodes of the unit patch with edge nodes moved to the cut parameters."""
    xy = np.zeros((9, 2))
    xy[:4] = REF_CORNERS
    for e, (a, b) in enumerate(EDGE_CORNERS):
        t = params.get(e, 0.5)
        xy[4 + e] = xy[a] + t * (xy[b] - xy[a])
    xy[8] = (0.5, 0.5)
    return xy


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def unit_grid():
    return build_quad_grid(4, 4, (0.0, 1.0, 0.0, 1.0))


@pytest.fixture(scope="session")
def alt_mesh():
    return build_alternating_mesh(4, 1e-3)


@pytest.fixture(scope="session")
def mixed_mesh():
    from anisostokes.mesh import build_circle_mesh

    return build_circle_mesh(0.25)
