import numpy as np
import pytest

from src.tube_mpc.errors import GeometryError, SigmaTooSmall
from src.tube_mpc.geometry import v_norm
from src.tube_mpc.tube import TubeCertificate, beta_rhs, certify, compute_lambda, psi_matrix


def test_psi_matrix():
    V = np.eye(2)
    np.testing.assert_allclose(psi_matrix(V, np.zeros(2), 0.0), V)
    # (1 - 0.01 / 0.04)^{-1} = 4 / 3 along w
    np.testing.assert_allclose(
        psi_matrix(V, np.array([0.1, 0.0]), 0.2), np.diag([4.0 / 3.0, 1.0]), atol=1e-12
    )
    with pytest.raises(SigmaTooSmall):
        psi_matrix(V, np.array([0.1, 0.0]), 0.1)
    with pytest.raises(SigmaTooSmall):
        psi_matrix(V, np.array([0.1, 0.0]), 0.0)


def test_compute_lambda_scalar():
    Phi = np.array([[0.5]])
    zero = [(np.zeros((1, 1)), np.zeros((1, 1)))]
    assert compute_lambda(Phi, zero, np.eye(1), np.zeros((1, 1)), 0.0) == pytest.approx(0.25)
    lam = compute_lambda(Phi, zero, np.eye(1), np.array([[0.1], [-0.1]]), 0.2)
    assert lam == pytest.approx(0.25 * 4.0 / 3.0)
    # the worst Jacobian deviation sets the factor
    pairs = [(np.array([[0.1]]), np.zeros((1, 1))), (np.array([[-0.3]]), np.zeros((1, 1)))]
    assert compute_lambda(Phi, pairs, np.eye(1), np.zeros((1, 1)), 0.0) == pytest.approx(0.36)


def test_one_step_containment(rng):
    # ||(Phi + C) e + w||_V^2 <= lambda ||e||_V^2 + sigma^2 on random instances
    for trial in range(50):
        n = 1 + trial % 6
        Phi = rng.standard_normal((n, n))
        pairs = [(0.2 * rng.standard_normal((n, n)), np.zeros((n, 1))) for _ in range(3)]
        L = rng.standard_normal((n, n))
        V = L @ L.T + 0.5 * np.eye(n)
        W = 0.1 * rng.standard_normal((4, n))
        sigma = 1.5 * max(v_norm(w, V) for w in W)
        lam = compute_lambda(Phi, pairs, V, W, sigma)

        E = rng.standard_normal((10_000, n))
        E /= np.sqrt(np.einsum("ij,jk,ik->i", E, V, E))[:, None]
        for C, _ in pairs:
            for w in W:
                Y = E @ (Phi + C).T + w
                lhs = np.einsum("ij,jk,ik->i", Y, V, Y)
                assert np.all(lhs <= lam + sigma ** 2 + 1e-7 * (1.0 + lam))


def test_certificate_and_radius_recursion():
    zero = [(np.zeros((1, 1)), np.zeros((1, 1)))]
    cert = certify(np.array([[0.5]]), zero, np.eye(1), np.zeros((1, 1)), 0.3)
    assert cert.lam == pytest.approx(0.25)
    # sqrt(0.25 * 4 + 0.09) + 0.1
    assert beta_rhs(cert, 2.0, 0.1) == pytest.approx(np.sqrt(1.09) + 0.1)
    with pytest.raises(GeometryError):
        beta_rhs(cert, -1.0, 0.0)
    with pytest.raises(GeometryError):
        TubeCertificate(-0.1, 0.0, np.eye(1))
