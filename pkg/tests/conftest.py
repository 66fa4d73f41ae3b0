import numpy as np
import pytest

from src.tube_mpc.bench import BenchmarkSpec, generate_instance
from src.tube_mpc.geometry import HPolytope, VPolytope
from src.tube_mpc.model import ProblemData, QuadraticBasisModel
from src.tube_mpc.terminal import design_terminal


def make_scalar_problem(N: int = 5) -> ProblemData:
    """x+ = 0.5 x + u + theta x^2 with theta in [-0.1, 0.1] and |w| <= 0.01."""
    model = QuadraticBasisModel([[0.5]], [[1.0]], [0], xhat_bound=1.5)
    return ProblemData(
        model=model,
        X=HPolytope.full_space(1),
        U=HPolytope.box(1.0, 1),
        Theta0=HPolytope.box(0.1, 1),
        W=VPolytope(np.array([[-0.01], [0.01]])),
        S=HPolytope.simplex(0.5, 0.5, 1),
        Vset=HPolytope.full_space(1),
        Q=np.eye(1),
        R=np.eye(1),
        N=N,
        Xhat=HPolytope.box(1.5, 1),
        Uhat=HPolytope.full_space(1),
    )


@pytest.fixture(scope="session")
def scalar_problem():
    return make_scalar_problem()


@pytest.fixture(scope="session")
def scalar_params(scalar_problem):
    return design_terminal(scalar_problem)


@pytest.fixture(scope="session")
def small_spec():
    return BenchmarkSpec(2, 1, 2, N=5, T=3, seed=7, instances=1)


@pytest.fixture(scope="session")
def small_instance(small_spec):
    return generate_instance(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
