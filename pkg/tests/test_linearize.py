import numpy as np
import pytest

from src.tube_mpc.errors import DimensionError, DivergentRollout
from src.tube_mpc.geometry import vertices
from src.tube_mpc.linearize import linearize_trajectory, rollout


def test_rollout_linear_closed_loop(scalar_problem, scalar_params):
    K = scalar_params.K
    a = 0.5 + float(K[0, 0])
    traj = rollout(scalar_problem, [0.3], np.zeros(scalar_problem.N), [0.0], K)
    assert traj.N == scalar_problem.N
    np.testing.assert_allclose(traj.x0[:, 0], 0.3 * a ** np.arange(scalar_problem.N + 1))
    np.testing.assert_allclose(traj.u0[:, 0], float(K[0, 0]) * traj.x0[:-1, 0])
    assert traj.resimulation_error(scalar_problem) == 0.0


def test_rollout_rejects_bad_input(scalar_problem):
    with pytest.raises(DimensionError):
        rollout(scalar_problem, [0.3], np.zeros(scalar_problem.N - 1), [0.0], np.zeros((1, 1)))
    with pytest.raises(DivergentRollout) as exc:
        rollout(scalar_problem, [1e200], np.zeros(scalar_problem.N), [1.0], np.zeros((1, 1)))
    assert exc.value.step == 1


def test_linearize_trajectory(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    v0 = np.full(pd.N, 0.05)
    traj = rollout(pd, [0.4], v0, [0.0], p.K)
    Theta = vertices(pd.Theta0)
    records = linearize_trajectory(pd, traj, Theta, p.V, p.sigma)
    assert len(records) == pd.N
    for k, rec in enumerate(records):
        x = traj.x0[k, 0]
        np.testing.assert_allclose(rec.Phi, [[0.5 + float(p.K[0, 0])]])
        np.testing.assert_allclose(rec.B, [[1.0]])
        # (theta - theta0) x^2 over the parameter vertices
        np.testing.assert_allclose(np.sort(rec.delta0_vertices.ravel()), [-0.1 * x ** 2, 0.1 * x ** 2])
        assert rec.lam >= float(rec.Phi[0, 0]) ** 2


def test_linearize_certainty_mode(scalar_problem, scalar_params):
    pd, p = scalar_problem, scalar_params
    traj = rollout(pd, [0.4], np.zeros(pd.N), [0.0], p.K)
    records = linearize_trajectory(pd, traj, vertices(pd.Theta0), p.V, 0.0, certainty=True)
    for rec in records:
        assert not np.any(rec.delta0_vertices)
        assert all(not np.any(C) for C, _ in rec.cd_pairs)
        assert rec.lam == pytest.approx(float(rec.Phi[0, 0]) ** 2)
