import numpy as np
import pytest
from hypothesis import settings

from dpsys.gridlab.pipeline import REFERENCE_GAMMA, preset_setup, reference_controller
from dpsys.linsys import StateSpace
from dpsys.synthesis import design_privacy_controller

settings.register_profile("dpsys", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("dpsys")


def random_system(rng, n, m, q, stable=False, scale=0.9):
    A = rng.standard_normal((n, n))
    if stable and n:
        A *= scale / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    return StateSpace(A, rng.standard_normal((n, m)), rng.standard_normal((q, n)),
                      rng.standard_normal((q, m)))


@pytest.fixture(scope="session")
def microgrid():
    params, plant, exo, x_r0, G1, regulator = preset_setup()
    return {"params": params, "plant": plant, "exo": exo, "x_r0": x_r0, "G1": G1,
            "regulator": regulator}


@pytest.fixture(scope="session")
def designed_controller(microgrid):
    mg = microgrid
    return design_privacy_controller(mg["plant"], mg["exo"], mg["G1"], gamma=REFERENCE_GAMMA,
                                     strict_regulator=False)


@pytest.fixture(scope="session")
def printed_controller(microgrid):
    mg = microgrid
    return reference_controller(mg["plant"], mg["exo"], mg["G1"], mg["regulator"])


@pytest.fixture(scope="session")
def scalar_tracking():
    """Scalar plant tracking a constant: its controller is strongly input observable."""
    plant = StateSpace([[0.9]], [[1.0]], [[1.0]], [[0.0]])
    exo = StateSpace([[1.0]], np.zeros((1, 0)), [[1.0]], np.zeros((1, 0)))
    ctrl = design_privacy_controller(plant, exo, gamma=2.0)
    return plant, exo, ctrl
