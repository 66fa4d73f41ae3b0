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
from typing import List, Optional, Tuple

import numpy as np

from src.tube_mpc.errors import DimensionError, DivergentRollout
from src.tube_mpc.geometry import FloatArray, VPolytope, as_matrix, as_vector
from src.tube_mpc.model import (
    ProblemData,
    closed_loop_dynamics,
    closed_loop_jacobians,
    jacobian_extreme_set,
    param_disturbance_vertices,
)
from src.tube_mpc.tube import compute_lambda


@dataclass
class NominalTrajectory:
    """Disturbance-free rollout under the nominal parameter.

    Attributes:
        x0 (FloatArray): States, shape (N + 1, n_x).
        v0 (FloatArray): Perturbations, shape (N, n_u).
        theta0 (FloatArray): Nominal parameter.
        K (FloatArray): Feedback gain.
    """

    x0: FloatArray
    v0: FloatArray
    theta0: FloatArray
    K: FloatArray

    @property
    def N(self) -> int:
        return int(self.v0.shape[0])

    @property
    def u0(self) -> FloatArray:
        return np.asarray(self.x0[:-1] @ self.K.T + self.v0)

    def resimulation_error(self, pd: ProblemData) -> float:
        """Largest deviation of the stored states from a fresh rollout."""
        again = rollout(pd, self.x0[0], self.v0, self.theta0, self.K)
        return float(np.abs(again.x0 - self.x0).max())


@dataclass
class StepLinearization:
    """Linearization of the closed loop around one nominal step.

    Attributes:
        Phi (FloatArray): State Jacobian of f_K.
        B (FloatArray): Perturbation Jacobian of f_K.
        delta0_vertices (FloatArray): Parameter-mismatch vertices, one per row.
        cd_pairs (List[Tuple[FloatArray, FloatArray]]): Jacobian deviation pairs.
        lam (float): Tube contraction factor of the step.
    """

    Phi: FloatArray
    B: FloatArray
    delta0_vertices: FloatArray
    cd_pairs: List[Tuple[FloatArray, FloatArray]]
    lam: float


def rollout(
    pd: ProblemData,
    x_init: FloatArray,
    v0: FloatArray,
    theta0: FloatArray,
    K: FloatArray,
) -> NominalTrajectory:
    """Simulates x_{k+1} = f_K(x_k, v_k, theta0) from `x_init`.

    Raises:
        DimensionError: `v0` does not have N rows.
        DivergentRollout: A state is not finite.
    """
    v0 = as_matrix(np.asarray(v0, dtype=float).reshape(-1, pd.model.n_u))
    if v0.shape[0] != pd.N:
        raise DimensionError(f"Perturbation sequence has {v0.shape[0]} steps, expected {pd.N}")
    K = as_matrix(K)
    theta0 = as_vector(theta0)
    x0 = np.zeros((pd.N + 1, pd.model.n_x))
    x0[0] = as_vector(x_init)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(pd.N):
            x0[k + 1] = closed_loop_dynamics(pd.model, x0[k], v0[k], theta0, K)
            if not np.all(np.isfinite(x0[k + 1])):
                raise DivergentRollout(k + 1)
    return NominalTrajectory(x0, v0, theta0, K)


def linearize_trajectory(
    pd: ProblemData,
    traj: NominalTrajectory,
    Theta: VPolytope,
    V: FloatArray,
    sigma: float,
    certainty: bool = False,
    W_vertices: Optional[FloatArray] = None,
) -> List[StepLinearization]:
    """Per-step Jacobians, error-set vertices and contraction factors.

    Args:
        pd (ProblemData): Control problem.
        traj (NominalTrajectory): Nominal trajectory.
        Theta (VPolytope): Current parameter set.
        V (FloatArray): Tube shape matrix.
        sigma (float): Disturbance radius.
        certainty (bool, optional): Drops the error sets and the disturbance, as in
            the certainty-equivalent problem. Defaults to False.
        W_vertices (Optional[FloatArray], optional): Disturbance vertices,
            `pd.W.vertices` by default.

    Returns:
        List[StepLinearization]: One record per step k < N.
    """
    m = pd.model
    if W_vertices is None:
        W_vertices = pd.W.vertices
    if certainty:
        W_vertices = np.zeros((1, m.n_x))
    records = []
    for k in range(traj.N):
        x, v = traj.x0[k], traj.v0[k]
        Phi, B = closed_loop_jacobians(m, x, v, traj.theta0, traj.K)
        if certainty:
            delta0 = np.zeros((1, m.n_x))
            pairs = [(np.zeros_like(Phi), np.zeros_like(B))]
        else:
            delta0 = param_disturbance_vertices(m, x, v, traj.theta0, Theta, traj.K)
            pairs = jacobian_extreme_set(m, x, v, traj.theta0, pd.S, pd.Vset, Theta, traj.K)
        lam = compute_lambda(Phi, pairs, V, W_vertices, sigma)
        records.append(StepLinearization(Phi, B, delta0, pairs, lam))
    return records
