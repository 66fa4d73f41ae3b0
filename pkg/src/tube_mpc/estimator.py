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

from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple
import logging

import numpy as np

from src.config import MEMBERSHIP_TOL, N_THETA_WINDOW
from src.tube_mpc.conic import SolveStatus, solve_lp
from src.tube_mpc.errors import EstimatorInconsistent
from src.tube_mpc.geometry import (
    FloatArray,
    HPolytope,
    VPolytope,
    as_vector,
    contains_point,
    vertices,
)
from src.tube_mpc.model import BasisModel

logger = logging.getLogger(__name__)

Transition = Tuple[FloatArray, FloatArray, FloatArray]


@dataclass(frozen=True)
class ParamEstimate:
    """Parameter set Theta_t = {theta : H theta <= h} with fixed facets.

    Attributes:
        H (FloatArray): Facet normals, simplex or box template.
        h (FloatArray): Current offsets.
        window (Tuple[Transition, ...]): Most recent transitions (x, u, x_next),
            oldest first.
    """

    H: FloatArray
    h: FloatArray
    window: Tuple[Transition, ...] = field(default_factory=tuple)

    @property
    def polytope(self) -> HPolytope:
        return HPolytope(self.H, self.h)

    @cached_property
    def vertices(self) -> VPolytope:
        return vertices(self.polytope)

    def contains(self, theta: FloatArray, tol: float = MEMBERSHIP_TOL) -> bool:
        return contains_point(self.polytope, theta, tol)


def initial_estimate(Theta0: HPolytope) -> ParamEstimate:
    # vertex enumeration validates the template
    vertices(Theta0)
    return ParamEstimate(Theta0.H.copy(), Theta0.h.copy())


def nominal(est: ParamEstimate) -> FloatArray:
    """Mean of the vertices of Theta_t."""
    return est.vertices.mean()


def update(
    est: ParamEstimate,
    model: BasisModel,
    W: VPolytope,
    x: FloatArray,
    u: FloatArray,
    x_next: FloatArray,
    window: int = N_THETA_WINDOW,
) -> ParamEstimate:
    """Shrinks Theta_t with a new transition, one LP per facet.

    Each LP maximizes H_i theta over theta in Theta_{t-1} such that every
    transition in the window satisfies x_next - f_0(x, u) - D theta in co(W), where
    D stacks the parameter bases. The new offsets are clipped at the previous ones.

    Args:
        est (ParamEstimate): Previous estimate.
        model (BasisModel): Dynamics.
        W (VPolytope): Disturbance set.
        x (FloatArray): State.
        u (FloatArray): Applied input.
        x_next (FloatArray): Measured successor state.
        window (int, optional): Number of transitions kept. Defaults to N_THETA_WINDOW.

    Raises:
        EstimatorInconsistent: An LP is infeasible, so the data contradict W and
            Theta_{t-1}.

    Returns:
        ParamEstimate: The nested estimate Theta_t.
    """
    transitions = (est.window + ((as_vector(x), as_vector(u), as_vector(x_next)),))[-window:]
    n_theta = est.H.shape[1]
    n_w = len(W)
    n_x = W.dim
    n_vars = n_theta + n_w * len(transitions)

    A_eq, b_eq = [], []
    for s, (xl, ul, xl_next) in enumerate(transitions):
        values = model.evaluate_bases(xl, ul)
        rows = np.zeros((n_x + 1, n_vars))
        rows[:n_x, :n_theta] = values[1:].T
        cols = slice(n_theta + s * n_w, n_theta + (s + 1) * n_w)
        rows[:n_x, cols] = W.vertices.T
        rows[n_x, cols] = 1.0
        A_eq.append(rows)
        b_eq.append(np.concatenate([xl_next - values[0], [1.0]]))

    A_ub = np.hstack([est.H, np.zeros((est.H.shape[0], n_vars - n_theta))])
    bounds = [(None, None)] * n_theta + [(0.0, None)] * (n_vars - n_theta)
    h_new = est.h.copy()
    for i, row in enumerate(est.H):
        c = np.concatenate([row, np.zeros(n_vars - n_theta)])
        result = solve_lp(
            c, A_ub, est.h, np.vstack(A_eq), np.concatenate(b_eq), bounds, maximize=True
        )
        if result.status is not SolveStatus.OPTIMAL:
            raise EstimatorInconsistent(i)
        h_new[i] = min(float(result.objective), est.h[i])
    logger.debug(f"Parameter offsets updated to {h_new}")
    return ParamEstimate(est.H, h_new, transitions)
