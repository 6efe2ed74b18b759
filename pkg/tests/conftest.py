import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from polyfeedback.fp_model import assemble_model, build_grid, initial_condition  # noqa: E402
from polyfeedback.potentials import triple_well_1d  # noqa: E402
from polyfeedback.projection import project  # noqa: E402
from polyfeedback.reduction import balance_truncate, gramians  # noqa: E402

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# widths giving L2 distances 0.57 (centered) and 0.76 (right well) at n = 1000
CENTERED_WIDTH = 0.50178
RIGHT_WIDTH = 0.51419


class Pipeline:
    def __init__(self, n):
        self.grid = build_grid([(-6.0, 6.0)], [n])
        self.model = assemble_model(self.grid, triple_well_1d(), 1.0)
        self.proj = project(self.model)
        self.pair = gramians(self.proj, 1e-6)

    def reduced(self, r):
        return balance_truncate(self.pair.X, self.pair.Y, self.proj, r=r)

    def y0(self, kind, **kw):
        rho0 = initial_condition(kind, self.grid, self.model.rho_inf, **kw)
        return rho0 - self.model.rho_inf

    def reduced_state(self, red, y0n):
        return red.W.T @ self.proj.project_state(y0n)


@pytest.fixture(scope="session")
def small_pipeline():
    return Pipeline(100)


@pytest.fixture(scope="session")
def pipeline():
    return Pipeline(1000)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
