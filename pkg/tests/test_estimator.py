import numpy as np
import pytest

from src.tube_mpc.errors import EstimatorInconsistent
from src.tube_mpc.estimator import initial_estimate, nominal, update


def test_update_scalar(scalar_problem):
    pd = scalar_problem
    est = initial_estimate(pd.Theta0)
    assert nominal(est) == pytest.approx(0.0)

    # x_next = 0.5 x + theta* x^2 with theta* = 0.03 and w = 0 at x = 0.5
    theta_star = 0.03
    est = update(est, pd.model, pd.W, [0.5], [0.0], [0.25 + theta_star * 0.25])
    # theta in theta* -/+ 0.01 / 0.25, clipped by the prior box
    order = np.argsort(-est.H[:, 0])
    np.testing.assert_allclose(est.h[order], [0.07, 0.01], atol=1e-9)
    assert nominal(est)[0] == pytest.approx(0.03)
    assert est.contains([theta_star])
    assert not est.contains([0.08])


def test_update_is_nested_and_keeps_truth(scalar_problem, rng):
    pd = scalar_problem
    theta_star = 0.04
    est = initial_estimate(pd.Theta0)
    for _ in range(20):
        x = rng.uniform(0.3, 1.0)
        u = rng.uniform(-0.2, 0.2)
        w = rng.uniform(-0.01, 0.01)
        x_next = 0.5 * x + u + theta_star * x ** 2 + w
        new = update(est, pd.model, pd.W, [x], [u], [x_next])
        assert np.all(new.h <= est.h + 1e-12)
        assert new.contains([theta_star], tol=1e-7)
        est = new
    assert len(est.window) == 5


def test_update_detects_inconsistent_data(scalar_problem):
    pd = scalar_problem
    est = initial_estimate(pd.Theta0)
    with pytest.raises(EstimatorInconsistent) as exc:
        # needs theta = 4, far outside the prior box
        update(est, pd.model, pd.W, [0.5], [0.0], [1.25])
    assert exc.value.facet == 0


def test_window_length(scalar_problem):
    pd = scalar_problem
    est = initial_estimate(pd.Theta0)
    for _ in range(3):
        est = update(est, pd.model, pd.W, [0.5], [0.0], [0.25], window=2)
    assert len(est.window) == 2
