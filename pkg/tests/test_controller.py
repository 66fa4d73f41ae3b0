import numpy as np
import pytest

from src.tube_mpc.controller import ControllerConfig, LineSearchOutcome, TubeMPCController
from src.tube_mpc.errors import InitialInfeasible
from src.tube_mpc.estimator import initial_estimate, update
from src.tube_mpc.model import eval_dynamics
from src.tube_mpc.ocp import CostDecrease


def _started(pd, params, x=0.2, **kwargs):
    controller = TubeMPCController(pd, params, ControllerConfig(**kwargs))
    v0 = controller.init_feasible([x])
    controller.reset([x], v0)
    return controller


def test_init_feasible_and_first_step(scalar_problem, scalar_params):
    pd = scalar_problem
    controller = TubeMPCController(pd, scalar_params)
    v0 = controller.init_feasible([0.2])
    assert v0.shape == (pd.N, 1)
    state = controller.reset([0.2], v0)
    assert state.t == 0
    assert state.theta0[0] == pytest.approx(0.0)

    u, report = controller.step([0.2])
    assert report.t == 0
    assert report.iterations >= 1
    assert report.feasible[0]
    assert abs(u[0]) <= 1.0 + 1e-9
    assert report.N_hat >= 1
    assert report.size["n_soc_blocks"] > 0
    assert controller.state.t == 1
    assert controller.state.v0.shape == (pd.N, 1)
    assert controller.state.J_final_prev == report.J_bar[-1]


def test_closed_loop_cost_decrease(scalar_problem, scalar_params):
    pd = scalar_problem
    controller = _started(pd, scalar_params)
    est = initial_estimate(pd.Theta0)
    theta_star = np.array([0.03])
    x = np.array([0.2])
    previous = None
    for _ in range(4):
        u, report = controller.step(x)
        if previous is not None and report.J_bar:
            J_prev, stage_prev, sigma_hat_prev = previous
            bound = J_prev - stage_prev + sigma_hat_prev ** 2
            assert report.J_bar[-1] <= bound + 1e-5 * (1.0 + abs(bound))
        previous = (
            (report.J_bar[-1], controller.state.stage_cost_prev, report.sigma_hat) if report.J_bar else None
        )
        x_next = eval_dynamics(pd.model, x, u, theta_star)
        est = update(est, pd.model, pd.W, x, u, x_next)
        controller.update_parameters(est)
        x = x_next
    assert controller.state.Theta.vertices.max() <= 0.1
    assert controller.state.params.d_Theta <= 0.2 + 1e-12


def test_update_parameters(scalar_problem, scalar_params):
    pd = scalar_problem
    controller = _started(pd, scalar_params)
    est = update(initial_estimate(pd.Theta0), pd.model, pd.W, [0.5], [0.0], [0.25 + 0.03 * 0.25])
    controller.update_parameters(est)
    assert controller.state.theta0[0] == pytest.approx(0.03)
    assert controller.state.params.d_Theta == pytest.approx(0.08)
    np.testing.assert_allclose(controller.state.params.V, scalar_params.V)


def test_step_requires_reset(scalar_problem, scalar_params):
    controller = TubeMPCController(scalar_problem, scalar_params)
    with pytest.raises(RuntimeError):
        controller.step([0.2])


def test_line_search_recovers(scalar_problem, scalar_params):
    pd = scalar_problem
    controller = _started(pd, scalar_params, line_search_maxiter=4)
    zero = np.zeros((pd.N, 1))
    x = np.array([0.2])
    outcome, attempt, v0, _, trials = controller.line_search(
        np.full((pd.N, 1), 100.0), zero, x, x, x, 1, CostDecrease()
    )
    assert outcome in (LineSearchOutcome.RECOVERED, LineSearchOutcome.FALLBACK)
    assert attempt is not None
    assert 1 <= trials <= 4
    assert np.abs(v0).max() < 100.0


def test_line_search_abandons(scalar_problem, scalar_params):
    pd = scalar_problem
    controller = _started(pd, scalar_params, line_search_maxiter=2, use_fallback=False)
    zero = np.zeros((pd.N, 1))
    x = np.array([0.2])
    # no objective value can satisfy J <= -1
    outcome, attempt, v0, _, trials = controller.line_search(
        np.full((pd.N, 1), 0.1), zero, x, x, x, 2, CostDecrease(prev_iter_J=-1.0)
    )
    assert outcome is LineSearchOutcome.ABANDONED
    assert attempt is None
    assert trials == 2
    np.testing.assert_allclose(v0, zero)


def test_init_feasible_reports_slack(scalar_problem, scalar_params):
    controller = TubeMPCController(scalar_problem, scalar_params)
    # the parameter mismatch at x = 10 alone exceeds rho_hat
    with pytest.raises(InitialInfeasible):
        controller.init_feasible([10.0])


def test_certainty_equivalent_controller(scalar_problem, scalar_params):
    controller = _started(scalar_problem, scalar_params, certainty_equivalent=True)
    assert controller.state.params.sigma == 0.0
    _, report = controller.step([0.2])
    assert report.J_bar
