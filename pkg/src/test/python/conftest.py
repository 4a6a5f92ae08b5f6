"""Shared fixtures: settings isolation and small reference problems"""

from pathlib import Path

import numpy as np
import pytest

from src.main.python.core.numerics import TimeGrid
from src.main.python.models.problem import DmPartition, make_problem
from src.main.python.utils.config import reload_settings

PROBLEM_DIR = Path(__file__).resolve().parents[2] / "main" / "resources" / "problems"


@pytest.fixture(autouse=True)
def fresh_settings():
    """Every test starts from settings read out of the (possibly monkeypatched) environment"""
    reload_settings()
    yield
    reload_settings()


@pytest.fixture
def problem_dir() -> Path:
    return PROBLEM_DIR


@pytest.fixture
def two_dm():
    """Two scalar subsystems coupled through A, B, H and (via rho) R"""

    def build(n_steps=200, T=1.0, rho=0.3, noise=(0.5, 0.4), x0_mean=(1.0, -0.5), x0_var=0.1):
        grid = TimeGrid(T, n_steps)
        return make_problem(
            grid, DmPartition((1, 1), (1, 1), (1, 1)),
            A=[[-0.5, 0.3], [0.2, -0.4]],
            B=[[1.0, 0.2], [0.1, 1.0]],
            G=np.diag(noise),
            H=[[1.0, 0.2], [0.2, 1.0]],
            R=[[1.0, rho], [rho, 1.0]],
            M_T=0.5 * np.eye(2),
            x0_mean=list(x0_mean),
            x0_cov=x0_var * np.eye(2),
        )

    return build


@pytest.fixture
def decoupled():
    """Block-diagonal A, B, G, H, R, M_T with a deterministic initial state"""

    def build(n_steps=200, x0_mean=(1.0, -0.5)):
        grid = TimeGrid(1.0, n_steps)
        return make_problem(
            grid, DmPartition((1, 1), (1, 1), (1, 1)),
            A=np.diag([-0.5, 0.3]), B=np.diag([1.0, 0.8]), G=np.diag([0.5, 0.4]),
            H=np.diag([1.0, 2.0]), R=np.diag([1.0, 0.5]), M_T=0.5 * np.eye(2),
            x0_mean=list(x0_mean), x0_cov=np.zeros((2, 2)),
        )

    return build


@pytest.fixture
def scalar_lq():
    """Scalar A=0, B=1, R=1, H=1, M_T=0: K(t) = tanh(T - t)"""

    def build(T=2.0, n_steps=2000, noise=0.0, x0_mean=1.0, x0_var=0.0, **overrides):
        grid = TimeGrid(T, n_steps)
        data = dict(A=[[0.0]], B=[[1.0]], G=[[noise]], H=[[1.0]], R=[[1.0]], M_T=[[0.0]])
        data.update(overrides)
        return make_problem(grid, DmPartition.single(1, 1, 1), x0_mean=[x0_mean], x0_cov=[[x0_var]], **data)

    return build


@pytest.fixture
def three_dm_ring():
    def build(n_steps=200, coupling=0.2):
        grid = TimeGrid(1.0, n_steps)
        R = np.eye(3)
        for i, j in ((0, 1), (1, 2), (2, 0)):
            R[i, j] = R[j, i] = coupling
        return make_problem(
            grid, DmPartition((1, 1, 1), (1, 1, 1), (1, 1, 1)),
            A=[[-0.5, 0.2, 0.0], [0.0, -0.4, 0.2], [0.2, 0.0, -0.3]],
            B=np.eye(3) + 0.1 * (np.ones((3, 3)) - np.eye(3)),
            G=0.3 * np.eye(3), H=np.eye(3), R=R, M_T=0.5 * np.eye(3),
            x0_mean=[1.0, -0.5, 0.3], x0_cov=0.05 * np.eye(3),
        )

    return build


def random_instance(seed: int, n_dms: int = 2, n_steps: int = 200, x0_var: float = 0.1):
    """Random coupled problem with scalar subsystems"""
    rng = np.random.default_rng(seed)
    n = n_dms
    C = rng.normal(size=(n, n))
    D = rng.normal(size=(n, n))
    R = 0.3 * D @ D.T / n + np.eye(n)
    return make_problem(
        TimeGrid(1.0, n_steps), DmPartition((1,) * n, (1,) * n, (1,) * n),
        A=0.5 * rng.normal(size=(n, n)), B=np.eye(n) + 0.3 * rng.normal(size=(n, n)),
        G=np.diag(0.2 + 0.5 * rng.random(n)), H=C @ C.T / n, R=R, M_T=0.5 * np.eye(n),
        x0_mean=rng.normal(size=n), x0_cov=x0_var * np.eye(n),
    )


@pytest.fixture
def random_problem():
    return random_instance
