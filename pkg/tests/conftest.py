import os
import tempfile

# Point the run ledger at a throwaway file before any app module builds its engine.
_LEDGER_DIR = tempfile.mkdtemp(prefix="langevin-ledger-")
os.environ.setdefault(
    "DATABASE_URL", f"sqlite+aiosqlite:///{os.path.join(_LEDGER_DIR, 'runs.db')}"
)

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.features.potentials.models import (  # noqa: E402
    BallPenaltyPotential,
    LaplaceGaussianPosterior1D,
    LaplaceGaussianPosteriorND,
    QuadraticPotential,
)


@pytest.fixture
def quadratic():
    return QuadraticPotential(dimension=1, curvature=1.0)


@pytest.fixture
def posterior_1d():
    return LaplaceGaussianPosterior1D(
        observations=[-1.0, 1.0], scale=1.0, prior_mean=0.0, prior_sd=1.0
    )


@pytest.fixture
def posterior_2d():
    return LaplaceGaussianPosteriorND(
        observations=[[1.0, 0.0], [-0.5, 0.8], [0.2, -1.1]], scale=1.0, prior_sd=1.0
    )


@pytest.fixture
def two_circles():
    return BallPenaltyPotential(
        centers=[[3.0, 0.0], [-3.0, 0.0]], radii=[1.0, 1.0], penalty=1.0, curvature=1.0
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
