# Copyright 2022 [PT BOOKBOT INDONESIA](https://bookbot.id/)

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from src.tube_mpc.errors import GeometryError, SigmaTooSmall
from src.tube_mpc.geometry import FloatArray, as_matrix, as_vector, check_spd, matrix_inv_sqrt


@dataclass(frozen=True)
class TubeCertificate:
    """One-step growth certificate of the ellipsoidal tube.

    Attributes:
        lam (float): Contraction factor lambda_k, nonnegative.
        sigma (float): Disturbance radius.
        V (FloatArray): Tube shape matrix.
    """

    lam: float
    sigma: float
    V: FloatArray

    def __post_init__(self):
        if self.lam < 0:
            raise GeometryError(f"Contraction factor must be nonnegative, got {self.lam}")


def psi_matrix(V: FloatArray, w: FloatArray, sigma: float) -> FloatArray:
    """Psi = (V^{-1} - w w^T / sigma^2)^{-1}.

    Args:
        V (FloatArray): Tube shape matrix, positive definite.
        w (FloatArray): Disturbance vertex.
        sigma (float): Disturbance radius.

    Raises:
        SigmaTooSmall: The inner matrix is not positive definite.

    Returns:
        FloatArray: Symmetric positive definite Psi.
    """
    V = as_matrix(V)
    w = as_vector(w)
    if not np.any(w):
        return V.copy()
    if sigma <= 0:
        raise SigmaTooSmall(f"sigma = {sigma} cannot cover disturbance vertex {w}")
    inner = np.linalg.inv(V) - np.outer(w, w) / sigma ** 2
    inner = 0.5 * (inner + inner.T)
    if np.linalg.eigvalsh(inner).min() <= 0:
        raise SigmaTooSmall(
            f"sigma = {sigma} is too small for disturbance vertex {w} under the tube shape"
        )
    return np.asarray(np.linalg.inv(inner))


def compute_lambda(
    Phi: FloatArray,
    cd_pairs: Sequence[Tuple[FloatArray, FloatArray]],
    V: FloatArray,
    W_vertices: FloatArray,
    sigma: float,
) -> float:
    """Smallest lambda with ||(Phi + C) e + w||_V^2 <= lambda ||e||_V^2 + sigma^2 for
    every C in the pair list and every disturbance vertex w.

    Args:
        Phi (FloatArray): Closed-loop Jacobian.
        cd_pairs (Sequence[Tuple[FloatArray, FloatArray]]): Pairs (C, D); only C enters.
        V (FloatArray): Tube shape matrix.
        W_vertices (FloatArray): Disturbance vertices, one per row.
        sigma (float): Disturbance radius.

    Returns:
        float: max over (C, w) of lambda_max(M^T Psi M) with M = (Phi + C) V^{-1/2}.
    """
    V = as_matrix(V)
    check_spd(V)
    V_is = matrix_inv_sqrt(V)
    psis: List[FloatArray] = [psi_matrix(V, w, sigma) for w in as_matrix(W_vertices)]
    lam = 0.0
    for C, _ in cd_pairs:
        M = (as_matrix(Phi) + as_matrix(C)) @ V_is
        for psi in psis:
            G = M.T @ psi @ M
            lam = max(lam, float(np.linalg.eigvalsh(0.5 * (G + G.T)).max()))
    return lam


def beta_rhs(cert: TubeCertificate, beta: float, offset_norm: float) -> float:
    """Right-hand side (lambda beta^2 + sigma^2)^{1/2} + ||C z + D v + delta0||_V of
    the radius recursion."""
    if beta < 0:
        raise GeometryError(f"Tube radius must be nonnegative, got {beta}")
    return float(np.sqrt(cert.lam * beta ** 2 + cert.sigma ** 2) + offset_norm)


def certify(
    Phi: FloatArray,
    cd_pairs: Sequence[Tuple[FloatArray, FloatArray]],
    V: FloatArray,
    W_vertices: FloatArray,
    sigma: float,
) -> TubeCertificate:
    return TubeCertificate(compute_lambda(Phi, cd_pairs, V, W_vertices, sigma), sigma, as_matrix(V))
