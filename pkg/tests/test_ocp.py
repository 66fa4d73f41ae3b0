import numpy as np
import pytest

from src.tube_mpc.bench import draw_initial_state
from src.tube_mpc.conic import SolveResult, SolveStatus, solve_socp
from src.tube_mpc.errors import AssemblyError, DimensionError, ValidationFailed
from src.tube_mpc.controller import TubeMPCController
from src.tube_mpc.geometry import contains_point, v_norm, vertices
from src.tube_mpc.linearize import linearize_trajectory, rollout
from src.tube_mpc.model import eval_dynamics
from src.tube_mpc.ocp import CostDecrease, assemble, check_problem_rows, count_constraints, dump, extract
from src.tube_mpc.terminal import find_terminal_horizon


def _setup(pd, params, x_plant=0.2, certainty=False):
    traj = rollout(pd, [x_plant], np.zeros(pd.N), [0.0], params.K)
    sigma = 0.0 if certainty else params.sigma
    lins = linearize_trajectory(pd, traj, vertices(pd.Theta0), params.V, sigma, certainty=certainty)
    return traj, lins


def test_assemble_structure(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    program = assemble(pd, traj, lins, p, [0.2])

    assert program.eq_tags == [f"dynamics_{k}" for k in range(pd.N)]
    tags = [c.tag for c in program.cones]
    n_tube = sum(len(lin.cd_pairs) * len(lin.delta0_vertices) for lin in lins)
    assert sum(t.startswith("tube_") and not t.startswith("tube_aux") for t in tags) == n_tube
    assert sum(t.startswith("omega_cone_") for t in tags) == p.N_hat
    assert tags.count("objective_epigraph") == 1
    assert "cost_decrease" not in program.ub_tags
    assert program.meta["x0N_norm"] == pytest.approx(np.sqrt(p.V[0, 0]) * abs(traj.x0[-1, 0]))

    stats = count_constraints(program)
    assert stats.n_soc_blocks == len(program.cones)
    assert stats.n_equality_rows == pd.N


def test_solve_and_validate(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    program = assemble(pd, traj, lins, p, [0.2])
    result = solve_socp(program)
    assert result.optimal
    sol = extract(program, result)

    assert sol.z_star.shape == (pd.N + 1, 1)
    assert sol.v_star.shape == (pd.N, 1)
    assert sol.beta_star.shape == (pd.N + 1 + p.N_hat,)
    assert sol.l_star.shape == (pd.N + 1 + p.N_hat,)
    assert sol.slack == 0.0
    assert sol.J_bar == pytest.approx(float(np.sum(sol.l_star ** 2)), rel=1e-5, abs=1e-7)

    rows = check_problem_rows(pd, traj, lins, p, [0.2], sol)
    assert max(violation for _, violation in rows) <= 1e-6
    tags = {tag for tag, _ in rows}
    assert {"initial", "omega_epigraph", "omega_cap", "objective_epigraph"} <= tags


def test_cost_decrease_row(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    base = extract(*_solved(assemble(pd, traj, lins, p, [0.2])))

    loose = assemble(pd, traj, lins, p, [0.2], CostDecrease(prev_iter_J=2.0 * base.J_bar), iteration=2)
    assert "cost_decrease" in loose.ub_tags
    program, result = _solved(loose)
    assert extract(program, result).J_bar == pytest.approx(base.J_bar, rel=1e-5, abs=1e-7)

    tight = assemble(pd, traj, lins, p, [0.2], CostDecrease(prev_iter_J=0.5 * base.J_bar), iteration=2)
    assert not solve_socp(tight).optimal

    # the first iteration bounds J by the previous step's cost
    cd = CostDecrease(prev_J_final=base.J_bar + 2.0, prev_stage_cost=1.0, prev_sigma_hat=0.0)
    program = assemble(pd, traj, lins, p, [0.2], cd, iteration=1)
    assert "cost_decrease" in program.ub_tags
    assert solve_socp(program).optimal


def test_cost_decrease_inputs_are_checked(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    with pytest.raises(AssemblyError):
        assemble(pd, traj, lins, p, [0.2], iteration=0)
    with pytest.raises(AssemblyError):
        assemble(pd, traj, lins, p, [0.2], iteration=2)
    with pytest.raises(AssemblyError):
        assemble(pd, traj, lins, p, [0.2], CostDecrease(prev_iter_J=1.0), iteration=1)
    with pytest.raises(AssemblyError):
        assemble(pd, traj, lins, p, [0.2], CostDecrease(prev_J_final=1.0), iteration=1)
    both = CostDecrease(prev_J_final=1.0, prev_stage_cost=0.0, prev_sigma_hat=0.0, prev_iter_J=1.0)
    with pytest.raises(AssemblyError):
        assemble(pd, traj, lins, p, [0.2], both, iteration=3)
    with pytest.raises(DimensionError):
        assemble(pd, traj, lins[:-1], p, [0.2])


def test_certainty_problem_pins_initial_radius(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params.certainty()
    traj, lins = _setup(pd, p, certainty=True)
    program = assemble(pd, traj, lins, p, [0.2], certainty=True)
    sol = extract(*_solved(program))
    assert sol.beta_star[0] == pytest.approx(0.0, abs=1e-6)


def test_relaxed_problem_reports_slack(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    program = assemble(pd, traj, lins, p, [0.2], relaxed=True)
    sol = extract(*_solved(program))
    # a feasible problem needs no slack
    assert sol.slack <= 1e-6


def test_extract_rejects_failed_solve(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    program = assemble(pd, traj, lins, p, [0.2])
    with pytest.raises(ValidationFailed) as exc:
        extract(program, SolveResult(SolveStatus.INFEASIBLE, None, None))
    assert exc.value.tag == "solver_status"
    with pytest.raises(ValidationFailed):
        extract(program, SolveResult(SolveStatus.OPTIMAL, 0.0, np.full(program.n_vars, 10.0)))


def test_dump(tmp_path, scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    program = assemble(pd, traj, lins, p, [0.2])
    path = dump(program, tmp_path / "out" / "program.txt")
    text = path.read_text()
    assert text.startswith(f"vars {program.n_vars}")
    assert "objective_epigraph" in text


def _solved(program):
    result = solve_socp(program)
    assert result.optimal
    return program, result


def test_assembly_uses_cached_inverse_root(monkeypatch, scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj, lins = _setup(pd, p)
    # the first assembly fills the cached V^{-1/2}
    expected = assemble(pd, traj, lins, p, [0.2])

    def not_recomputed(V):
        raise AssertionError("V^{-1/2} recomputed during assembly")

    monkeypatch.setattr("src.tube_mpc.geometry.matrix_inv_sqrt", not_recomputed)
    program = assemble(pd, traj, lins, p, [0.2])
    np.testing.assert_allclose(program.b_ub, expected.b_ub)
    np.testing.assert_allclose(program.A_ub.toarray(), expected.A_ub.toarray())


@pytest.mark.slow
def test_sampled_trajectories_stay_in_tube(small_instance):
    pd, params = small_instance.pd, small_instance.params
    rng = np.random.default_rng(11)
    x_init, v0 = draw_initial_state(TubeMPCController(pd, params), rng)
    Theta = vertices(pd.Theta0)
    traj = rollout(pd, x_init, v0, Theta.mean(), params.K)
    N_hat, sigma_hat = find_terminal_horizon(params, v_norm(traj.x0[-1], params.V))
    p = params.with_horizon(N_hat, sigma_hat)
    lins = linearize_trajectory(pd, traj, Theta, p.V, p.sigma)
    program = assemble(pd, traj, lins, p, x_init)
    result = solve_socp(program)
    assert result.optimal
    sol = extract(program, result)

    centers = traj.x0 + sol.z_star
    beta = sol.beta_star[: pd.N + 1]
    W = pd.W.vertices
    for _ in range(100):
        theta = rng.dirichlet(np.ones(len(Theta.vertices))) @ Theta.vertices
        x = np.asarray(x_init, dtype=float)
        for k in range(pd.N + 1):
            assert v_norm(x - centers[k], p.V) <= beta[k] * (1.0 + 1e-6) + 1e-9
            assert contains_point(pd.X, x, 1e-6)
            if k == pd.N:
                break
            u = p.K @ x + traj.v0[k] + sol.v_star[k]
            assert contains_point(pd.U, u, 1e-6)
            w = rng.dirichlet(np.ones(len(W))) @ W
            x = eval_dynamics(pd.model, x, u, theta) + w
