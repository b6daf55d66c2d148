from __future__ import annotations

import numpy as np
import pytest

from eikonal_twin.anatomy import AnatomyParams, build_anatomy, cube_mesh
from eikonal_twin.mesh import VelocityField
from eikonal_twin.torso import TorsoModel, compute_lead_vectors_many, make_leadset

TINY = dict(factor=0.4, h_ventricle=3.0, h_torso=8.0)


@pytest.fixture(scope="session")
def tiny_params():
    return AnatomyParams().scaled(TINY["factor"], h_ventricle=TINY["h_ventricle"],
                                  h_torso=TINY["h_torso"])


@pytest.fixture(scope="session")
def tiny_anatomy(tiny_params):
    return build_anatomy(tiny_params)


@pytest.fixture(scope="session")
def tiny_torso(tiny_anatomy):
    a = tiny_anatomy
    return TorsoModel(a.torso, a.heart_vertices, a.frames, tol=1e-10)


@pytest.fixture(scope="session")
def tiny_leads(tiny_anatomy, tiny_torso):
    sets = [make_leadset(tiny_anatomy.torso, lay) for lay in ("limb4", "ecg12", "vest32")]
    compute_lead_vectors_many(tiny_torso, sets, "cg", keep_fields=True)
    return {ls.layout: ls for ls in sets}


@pytest.fixture(scope="session")
def cube8():
    return cube_mesh(8, 8.0)


@pytest.fixture(scope="session")
def iso8(cube8):
    return VelocityField.isotropic(cube8.n_tets, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
