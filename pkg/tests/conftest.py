"""Shared fixtures; the expensive solves are session-scoped and reused."""

import numpy as np
import pytest

from wakeflow.exterior import BoundaryDataModes, ExteriorSolveConfig, solve_exterior
from wakeflow.fields import ModeKernelSet, SourceModeField
from wakeflow.geometry import BodyGeometry, make_sphere_quadrature
from wakeflow.harness import StudyConfig, make_reference, run_truncation_study

ZETA = np.array([0.5, 0.0, 0.0])
PERIOD = 2.0 * np.pi


@pytest.fixture(scope="session")
def body():
    return BodyGeometry(1.0)


@pytest.fixture(scope="session")
def surface_quad():
    return make_sphere_quadrature(16)  # 512 nodes


@pytest.fixture(scope="session")
def manufactured_truth(body, surface_quad):
    """Interior two-source ensemble with steady and first-mode strengths."""
    kernels = ModeKernelSet(ZETA, PERIOD, 1, r_max=130.0)
    src = np.array([[0.0, 0.0, 0.3], [0.2, -0.1, 0.0]])
    amp = 0.01 * np.array(
        [
            [[1.0, 0.0, 0.0], [0.0, 0.5, 0.0]],
            [[0.3 + 0.2j, -0.1j, 0.05], [0.0, 0.0, 0.2j]],
        ],
        dtype=complex,
    )
    return SourceModeField(kernels, src, amp)


@pytest.fixture(scope="session")
def manufactured_data(body, surface_quad, manufactured_truth):
    pts = body.radius * surface_quad.nodes
    return BoundaryDataModes(body, surface_quad, PERIOD, manufactured_truth.velocity_modes(pts))


@pytest.fixture(scope="session")
def manufactured_solution(manufactured_data):
    return solve_exterior(manufactured_data, ZETA, ExteriorSolveConfig(n_sources=256))


@pytest.fixture(scope="session")
def oscillating_data(body, surface_quad):
    """Boundary trace sin(omega t) n: purely oscillating total flux."""
    pts = body.radius * surface_quad.nodes
    modes = np.zeros((2, pts.shape[0], 3), dtype=complex)
    modes[1] = body.normals(pts) / 2j
    return BoundaryDataModes(body, surface_quad, PERIOD, modes)


@pytest.fixture(scope="session")
def oscillating_solution(oscillating_data):
    return solve_exterior(oscillating_data, ZETA, ExteriorSolveConfig(n_sources=144))


@pytest.fixture(scope="session")
def study_config():
    return StudyConfig(threads=2)


@pytest.fixture(scope="session")
def study_reference(study_config):
    return make_reference(study_config)


@pytest.fixture(scope="session")
def truncation_study(study_config, study_reference):
    """The full default radius sweep; this is the long-running fixture."""
    return run_truncation_study(study_config, reference=study_reference, verbose=True)
