import logging

import cvxpy as cp
import numpy as np
import pytest

from src.tube_mpc.conic import (
    ConicBackend,
    SolveResult,
    SolverSettings,
    SolveStatus,
    map_status,
    solve_lp,
    solve_sdp,
    solve_socp,
)
from src.tube_mpc.program import Affine, ProgramBuilder


def test_solve_socp_unit_ball():
    b = ProgramBuilder()
    x = b.add_variable("x", 2)
    b.add_soc(1.0, x, "ball")
    b.minimize(np.ones((1, 2)) @ x)
    result = solve_socp(b.build())
    assert result.optimal
    assert result.objective == pytest.approx(-np.sqrt(2.0), abs=1e-6)
    np.testing.assert_allclose(result.x, [-np.sqrt(0.5)] * 2, atol=1e-6)


def test_solve_socp_groups_cones_of_equal_dimension():
    b = ProgramBuilder()
    x = b.add_variable("x", 3)
    t = b.add_variable("t", 3)
    for i in range(3):
        b.add_soc(t[i], Affine.vstack([x[i], Affine.constant(float(i + 1))]), f"cone_{i}")
    b.minimize(np.ones((1, 3)) @ t)
    result = solve_socp(b.build())
    assert result.optimal
    # t_i >= ||(x_i, i + 1)||, minimized at x = 0
    assert result.objective == pytest.approx(6.0, abs=1e-6)


def test_solve_socp_infeasible():
    b = ProgramBuilder()
    x = b.add_variable("x", 1)
    b.add_le(x + 1.0, "below")
    b.add_le(-x, "above")
    b.minimize(x)
    result = solve_socp(b.build())
    assert result.status is SolveStatus.INFEASIBLE
    assert result.x is None


def test_solve_socp_empty_program():
    result = solve_socp(ProgramBuilder().build())
    assert result.optimal
    assert result.objective == 0.0


def test_solve_sdp():
    t = cp.Variable()
    block = cp.bmat([[cp.reshape(t, (1, 1)), np.ones((1, 1))], [np.ones((1, 1)), np.ones((1, 1))]])
    result = solve_sdp(t, [block])
    assert result.optimal
    assert result.objective == pytest.approx(1.0, abs=1e-6)
    assert float(t.value) == pytest.approx(1.0, abs=1e-6)


def test_solve_lp():
    # maximize x + y over the unit simplex
    result = solve_lp(
        np.ones(2), A_ub=np.ones((1, 2)), b_ub=[1.0], bounds=[(0, None)] * 2, maximize=True
    )
    assert result.optimal
    assert result.objective == pytest.approx(1.0)
    infeasible = solve_lp(np.ones(1), A_ub=[[1.0], [-1.0]], b_ub=[-1.0, 0.0])
    assert infeasible.status is SolveStatus.INFEASIBLE


def test_status_mapping():
    assert map_status(cp.OPTIMAL, "X") is SolveStatus.OPTIMAL
    assert map_status(cp.OPTIMAL_INACCURATE, "X") is SolveStatus.OPTIMAL
    assert map_status(cp.INFEASIBLE, "X") is SolveStatus.INFEASIBLE
    assert map_status(cp.INFEASIBLE_INACCURATE, "X") is SolveStatus.NUMERICAL_FAILURE
    assert map_status(cp.USER_LIMIT, "X") is SolveStatus.TIME_LIMIT
    assert map_status(None, "X") is SolveStatus.NUMERICAL_FAILURE

    # an optimum without a finite primal vector is a numerical failure
    assert SolveResult(SolveStatus.OPTIMAL, 1.0, None).status is SolveStatus.NUMERICAL_FAILURE
    bad = SolveResult(SolveStatus.OPTIMAL, 1.0, np.array([np.nan]))
    assert bad.status is SolveStatus.NUMERICAL_FAILURE


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("TUBE_MPC_SOCP_SOLVER", "scs")
    settings = SolverSettings.from_env()
    assert settings.socp_solvers[0] == "SCS"


def test_numerical_failure_falls_through_to_next_solver(monkeypatch, caplog):
    backend = ConicBackend()
    if len(backend.socp_solvers) < 2:
        pytest.skip("needs two installed SOCP backends")
    first, second = backend.socp_solvers[:2]
    original = cp.Problem.solve

    def failing_first(self, *args, **kwargs):
        if kwargs.get("solver") == first:
            raise cp.error.SolverError("forced failure")
        return original(self, *args, **kwargs)

    monkeypatch.setattr(cp.Problem, "solve", failing_first)
    b = ProgramBuilder()
    x = b.add_variable("x", 2)
    b.add_soc(1.0, x, "ball")
    b.minimize(np.ones((1, 2)) @ x)
    with caplog.at_level(logging.WARNING):
        result = solve_socp(b.build(), backend=backend)
    assert result.optimal
    assert result.solver == second
    assert result.objective == pytest.approx(-np.sqrt(2.0), abs=1e-5)
    assert f"retrying with {second}" in caplog.text


def test_backend_deduplicates_preferences(monkeypatch):
    monkeypatch.setenv("TUBE_MPC_SOCP_SOLVER", "clarabel")
    backend = ConicBackend(SolverSettings.from_env())
    assert len(backend.socp_solvers) == len(set(backend.socp_solvers))
