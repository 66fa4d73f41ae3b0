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
from itertools import product
from typing import Callable, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from src.config import MAX_BOX_VERTICES
from src.tube_mpc.errors import DimensionError, ModelError
from src.tube_mpc.geometry import (
    FloatArray,
    HPolytope,
    VPolytope,
    as_matrix,
    as_vector,
    bounding_box,
    hull_contains,
    vertices,
)

Basis = Callable[[FloatArray, FloatArray], FloatArray]
Jacobian = Callable[[FloatArray, FloatArray], FloatArray]
# (x_lo, x_hi, u_lo, u_hi, theta_lo, theta_hi) -> (Jx_lo, Jx_hi, Ju_lo, Ju_hi)
JacobianInterval = Callable[
    [FloatArray, FloatArray, FloatArray, FloatArray, FloatArray, FloatArray],
    Tuple[FloatArray, FloatArray, FloatArray, FloatArray],
]


@dataclass
class BasisModel:
    """Dynamics x+ = f_0(x, u) + sum_i theta_i f_i(x, u) given by basis callables.

    Attributes:
        n_x (int): State dimension.
        n_u (int): Input dimension.
        n_theta (int): Number of uncertain parameters.
        basis (Sequence[Basis]): f_0, ..., f_{n_theta}, each mapping (x, u) to R^{n_x}.
        jac_x (Sequence[Jacobian]): Jacobians of each basis with respect to x.
        jac_u (Sequence[Jacobian]): Jacobians of each basis with respect to u.
        lipschitz_L (float): Euclidean Lipschitz constant of f_{K,i}(., 0), i >= 1,
            on the terminal region.
        constant_basis (FrozenSet[int]): Indices i >= 1 of constant (disturbance)
            bases, exempt from f_i(0, 0) = 0.
        vertex_attained (bool): Jacobians are affine in (x, u) for fixed theta, so
            their extremes over polytopes sit at vertex combinations.
        jacobians_input_free (bool): Jacobians do not depend on u.
        jacobian_interval (Optional[JacobianInterval]): Interval enclosure of the
            full Jacobians (theta-weighted) over a box, used when extremes are not
            vertex-attained.
    """

    n_x: int
    n_u: int
    n_theta: int
    basis: Sequence[Basis]
    jac_x: Sequence[Jacobian]
    jac_u: Sequence[Jacobian]
    lipschitz_L: float
    constant_basis: FrozenSet[int] = field(default_factory=frozenset)
    vertex_attained: bool = False
    jacobians_input_free: bool = False
    jacobian_interval: Optional[JacobianInterval] = None

    def __post_init__(self):
        for name in ("basis", "jac_x", "jac_u"):
            if len(getattr(self, name)) != self.n_theta + 1:
                raise DimensionError(f"{name} needs {self.n_theta + 1} entries")
        x0, u0 = np.zeros(self.n_x), np.zeros(self.n_u)
        values = self.evaluate_bases(x0, u0)
        for i in range(1, self.n_theta + 1):
            if i not in self.constant_basis and np.any(values[i] != 0.0):
                raise ModelError(f"Basis f_{i} must vanish at the origin")

    def evaluate_bases(self, x: FloatArray, u: FloatArray) -> FloatArray:
        """Returns the (n_theta + 1, n_x) array [f_0(x, u); ...; f_p(x, u)]."""
        x, u = self._check(x, u)
        return np.stack([as_vector(f(x, u)) for f in self.basis])

    def jacobians(
        self, x: FloatArray, u: FloatArray, theta: FloatArray
    ) -> Tuple[FloatArray, FloatArray]:
        """Jacobians of f(x, u, theta) with respect to x and u."""
        x, u = self._check(x, u)
        weights = np.concatenate([[1.0], as_vector(theta)])
        Jx = sum(w * as_matrix(J(x, u)) for w, J in zip(weights, self.jac_x))
        Ju = sum(w * as_matrix(J(x, u)) for w, J in zip(weights, self.jac_u))
        return np.asarray(Jx), np.asarray(Ju)

    def _check(self, x: FloatArray, u: FloatArray) -> Tuple[FloatArray, FloatArray]:
        x, u = as_vector(x), as_vector(u)
        if x.shape[0] != self.n_x or u.shape[0] != self.n_u:
            raise DimensionError(
                f"Expected x in R^{self.n_x}, u in R^{self.n_u}, "
                f"got {x.shape[0]} and {u.shape[0]}"
            )
        return x, u


class QuadraticBasisModel(BasisModel):
    """Benchmark family f_0 = Ax + Bu, f_i = e_i [x]_{j_i}^2.

    Args:
        A (FloatArray): State matrix.
        B (FloatArray): Input matrix.
        j_indices (Sequence[int]): State index squared by each parameter's basis.
        xhat_bound (float): Infinity-norm radius of the terminal region, sets
            the Lipschitz constant 2 * xhat_bound.
    """

    def __init__(
        self, A: FloatArray, B: FloatArray, j_indices: Sequence[int], xhat_bound: float
    ):
        self.A = as_matrix(A)
        self.B = as_matrix(B)
        self.j_indices = [int(j) for j in j_indices]
        self.xhat_bound = float(xhat_bound)
        n_x, n_u = self.B.shape
        n_theta = len(self.j_indices)
        if n_theta > n_x:
            raise DimensionError("Quadratic bases need n_theta <= n_x")
        if any(j < 0 or j >= n_x for j in self.j_indices):
            raise DimensionError(f"Basis indices must lie in [0, {n_x})")

        basis: List[Basis] = [lambda x, u: self.A @ x + self.B @ u]
        jac_x: List[Jacobian] = [lambda x, u: self.A]
        jac_u: List[Jacobian] = [lambda x, u: self.B]
        zero_u = np.zeros((n_x, n_u))
        for i, j in enumerate(self.j_indices):
            basis.append(self._square(i, j))
            jac_x.append(self._square_jacobian(i, j))
            jac_u.append(lambda x, u: zero_u)

        super().__init__(
            n_x=n_x,
            n_u=n_u,
            n_theta=n_theta,
            basis=basis,
            jac_x=jac_x,
            jac_u=jac_u,
            lipschitz_L=2.0 * self.xhat_bound,
            vertex_attained=True,
            jacobians_input_free=True,
            jacobian_interval=self._interval,
        )

    def _square(self, i: int, j: int) -> Basis:
        def f(x: FloatArray, u: FloatArray) -> FloatArray:
            out = np.zeros(self.A.shape[0])
            out[i] = x[j] ** 2
            return out

        return f

    def _square_jacobian(self, i: int, j: int) -> Jacobian:
        def J(x: FloatArray, u: FloatArray) -> FloatArray:
            out = np.zeros_like(self.A)
            out[i, j] = 2.0 * x[j]
            return out

        return J

    def _interval(
        self,
        x_lo: FloatArray,
        x_hi: FloatArray,
        u_lo: FloatArray,
        u_hi: FloatArray,
        theta_lo: FloatArray,
        theta_hi: FloatArray,
    ) -> Tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
        Jx_lo, Jx_hi = self.A.copy(), self.A.copy()
        for i, j in enumerate(self.j_indices):
            products = [2.0 * t * x for t in (theta_lo[i], theta_hi[i]) for x in (x_lo[j], x_hi[j])]
            Jx_lo[i, j] += min(products)
            Jx_hi[i, j] += max(products)
        return Jx_lo, Jx_hi, self.B.copy(), self.B.copy()


@dataclass
class ProblemData:
    """Everything the controller needs about one control problem.

    Attributes:
        model (BasisModel): Dynamics.
        X (HPolytope): State constraints.
        U (HPolytope): Input constraints, origin in the interior.
        Theta0 (HPolytope): Initial parameter set (simplex or box template).
        W (VPolytope): Additive disturbance set.
        S (HPolytope): State perturbation set (simplex or box template).
        Vset (HPolytope): Input perturbation set, possibly the full space.
        Q (FloatArray): State weight.
        R (FloatArray): Input weight.
        N (int): Prediction horizon.
        Xhat (HPolytope): State region of the terminal LDI.
        Uhat (HPolytope): Input region of the terminal LDI.
    """

    model: BasisModel
    X: HPolytope
    U: HPolytope
    Theta0: HPolytope
    W: VPolytope
    S: HPolytope
    Vset: HPolytope
    Q: FloatArray
    R: FloatArray
    N: int
    Xhat: HPolytope
    Uhat: HPolytope

    def __post_init__(self):
        m = self.model
        self.Q = as_matrix(self.Q)
        self.R = as_matrix(self.R)
        if self.N < 1:
            raise DimensionError(f"Horizon must be at least 1, got {self.N}")
        for name, dim in (
            ("X", m.n_x), ("S", m.n_x), ("Xhat", m.n_x),
            ("U", m.n_u), ("Vset", m.n_u), ("Uhat", m.n_u),
            ("Theta0", m.n_theta),
        ):
            if getattr(self, name).dim != dim:
                raise DimensionError(f"{name} has dimension {getattr(self, name).dim}, expected {dim}")
        if self.W.dim != m.n_x:
            raise DimensionError(f"W has dimension {self.W.dim}, expected {m.n_x}")
        for name, M in (("Q", self.Q), ("R", self.R)):
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
                raise DimensionError(f"{name} must be positive definite")
        for name in ("U", "S"):
            if np.any(getattr(self, name).h <= 0):
                raise ModelError(f"Origin must lie in the interior of {name}")
        if not self.Vset.is_full_space() and np.any(self.Vset.h <= 0):
            raise ModelError("Origin must lie in the interior of Vset")
        if not hull_contains(self.W.vertices, np.zeros(m.n_x)):
            raise ModelError("W must contain the origin")

    def theta_vertices(self) -> VPolytope:
        return vertices(self.Theta0)

    def aggregate_constraints(self, K: FloatArray) -> Tuple[FloatArray, FloatArray]:
        """Rows (Hbar, hbar) of X cap Xhat cap {x : Kx in U cap Uhat}."""
        K = as_matrix(K)
        H = np.vstack([self.X.H, self.Xhat.H, self.U.H @ K, self.Uhat.H @ K])
        h = np.concatenate([self.X.h, self.Xhat.h, self.U.h, self.Uhat.h])
        # rows with a vanishing normal hold trivially since every offset is positive
        keep = np.linalg.norm(H, axis=1) > 0
        return H[keep], h[keep]


def eval_dynamics(
    m: BasisModel, x: FloatArray, u: FloatArray, theta: FloatArray
) -> FloatArray:
    """f_0(x, u) + sum_i theta_i f_i(x, u)."""
    theta = as_vector(theta)
    if theta.shape[0] != m.n_theta:
        raise DimensionError(f"Expected {m.n_theta} parameters, got {theta.shape[0]}")
    values = m.evaluate_bases(x, u)
    return np.asarray(values[0] + theta @ values[1:])


def closed_loop_dynamics(
    m: BasisModel, x: FloatArray, v: FloatArray, theta: FloatArray, K: FloatArray
) -> FloatArray:
    """f_K(x, v, theta) = f(x, Kx + v, theta)."""
    x = as_vector(x)
    return eval_dynamics(m, x, as_matrix(K) @ x + as_vector(v), theta)


def closed_loop_jacobians(
    m: BasisModel, x0: FloatArray, v0: FloatArray, theta0: FloatArray, K: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """Phi = d/dx f_K and B = d/dv f_K at (x0, v0, theta0).

    Returns:
        Tuple[FloatArray, FloatArray]: Pair (Phi, B).
    """
    x0 = as_vector(x0)
    K = as_matrix(K)
    Jx, Ju = m.jacobians(x0, K @ x0 + as_vector(v0), theta0)
    return Jx + Ju @ K, Ju


def param_disturbance_vertices(
    m: BasisModel,
    x0: FloatArray,
    v0: FloatArray,
    theta0: FloatArray,
    Theta: VPolytope,
    K: FloatArray,
) -> FloatArray:
    """Vertices delta0^(q) = sum_i (theta^(q)_i - theta0_i) f_i(x0, K x0 + v0).

    Returns:
        FloatArray: One row per vertex of `Theta`.
    """
    x0 = as_vector(x0)
    values = m.evaluate_bases(x0, as_matrix(K) @ x0 + as_vector(v0))
    return np.asarray((Theta.vertices - as_vector(theta0)) @ values[1:])


def constant_shift_vertices(m: BasisModel, Theta: VPolytope) -> FloatArray:
    """Vertices w_c^(q) = sum_{i in C} theta^(q)_i f_i(0, 0) of the constant bases."""
    values = m.evaluate_bases(np.zeros(m.n_x), np.zeros(m.n_u))
    mask = np.zeros(m.n_theta)
    for i in m.constant_basis:
        mask[i - 1] = 1.0
    return np.asarray((Theta.vertices * mask) @ values[1:])


def unique_pairs(pairs: List[Tuple[FloatArray, FloatArray]]) -> List[Tuple[FloatArray, FloatArray]]:
    """Drops exact duplicates, keeping first occurrences in order."""
    if not pairs:
        return pairs
    flat = np.stack([np.concatenate([C.ravel(), D.ravel()]) for C, D in pairs])
    _, first = np.unique(flat, axis=0, return_index=True)
    return [pairs[i] for i in sorted(first)]


def jacobian_extreme_set(
    m: BasisModel,
    x0: FloatArray,
    v0: FloatArray,
    theta0: FloatArray,
    S: HPolytope,
    Vset: HPolytope,
    Theta: VPolytope,
    K: FloatArray,
) -> List[Tuple[FloatArray, FloatArray]]:
    """Pairs (C^(j), D^(j)) whose hull bounds the closed-loop Jacobian deviations
    over (s, v, theta) in S x Vset x Theta.

    Args:
        m (BasisModel): Dynamics.
        x0 (FloatArray): Nominal state.
        v0 (FloatArray): Nominal perturbation.
        theta0 (FloatArray): Nominal parameter.
        S (HPolytope): State perturbation set.
        Vset (HPolytope): Input perturbation set.
        Theta (VPolytope): Parameter set.
        K (FloatArray): Feedback gain.

    Raises:
        ModelError: The model cannot bound its Jacobians on the requested region.

    Returns:
        List[Tuple[FloatArray, FloatArray]]: Deduplicated pairs.
    """
    x0, v0, K = as_vector(x0), as_vector(v0), as_matrix(K)
    Phi, B = closed_loop_jacobians(m, x0, v0, theta0, K)
    if m.vertex_attained:
        s_points = vertices(S).vertices
        if m.jacobians_input_free:
            v_points = np.zeros((1, m.n_u))
        elif Vset.is_full_space():
            raise ModelError("Input-dependent Jacobians need a bounded Vset")
        else:
            v_points = vertices(Vset).vertices
        pairs = []
        for s, v, theta in product(s_points, v_points, Theta.vertices):
            x = x0 + s
            Jx, Ju = m.jacobians(x, K @ x + v0 + v, theta)
            pairs.append((Jx + Ju @ K - Phi, Ju - B))
        return unique_pairs(pairs)

    if m.jacobian_interval is None:
        raise ModelError("Model provides neither vertex-attained nor interval Jacobian bounds")
    s_box = bounding_box(S)
    x_lo, x_hi = x0 + s_box[0], x0 + s_box[1]
    if Vset.is_full_space():
        if not m.jacobians_input_free:
            raise ModelError("Input-dependent Jacobians need a bounded Vset")
        v_box = np.zeros((2, m.n_u))
    else:
        v_box = bounding_box(Vset)
    # u = K x + v0 + v over the box hull, in midpoint-radius form
    x_mid, x_rad = 0.5 * (x_lo + x_hi), 0.5 * (x_hi - x_lo)
    u_mid = K @ x_mid + v0 + 0.5 * (v_box[0] + v_box[1])
    u_rad = np.abs(K) @ x_rad + 0.5 * (v_box[1] - v_box[0])
    theta_lo = Theta.vertices.min(axis=0)
    theta_hi = Theta.vertices.max(axis=0)
    Jx_lo, Jx_hi, Ju_lo, Ju_hi = m.jacobian_interval(
        x_lo, x_hi, u_mid - u_rad, u_mid + u_rad, theta_lo, theta_hi
    )
    return interval_extremes(Jx_lo, Jx_hi, Ju_lo, Ju_hi, K, Phi, B)


def interval_extremes(
    Jx_lo: FloatArray,
    Jx_hi: FloatArray,
    Ju_lo: FloatArray,
    Ju_hi: FloatArray,
    K: FloatArray,
    Phi: FloatArray,
    B: FloatArray,
) -> List[Tuple[FloatArray, FloatArray]]:
    """Corners of the closed-loop Jacobian box, as deviations from (Phi, B)."""
    Jx_mid, Jx_rad = 0.5 * (Jx_lo + Jx_hi), 0.5 * (Jx_hi - Jx_lo)
    Ju_mid, Ju_rad = 0.5 * (Ju_lo + Ju_hi), 0.5 * (Ju_hi - Ju_lo)
    C_mid = Jx_mid + Ju_mid @ K - Phi
    C_rad = Jx_rad + Ju_rad @ np.abs(K)
    D_mid = Ju_mid - B
    mid = np.concatenate([C_mid.ravel(), D_mid.ravel()])
    rad = np.concatenate([C_rad.ravel(), Ju_rad.ravel()])
    free = np.flatnonzero(rad > 0)
    if 2 ** len(free) > MAX_BOX_VERTICES:
        raise ModelError(f"Interval Jacobian box has {len(free)} free entries")
    n_c = C_mid.size
    pairs = []
    for signs in product((-1.0, 1.0), repeat=len(free)):
        flat = mid.copy()
        flat[free] += np.asarray(signs) * rad[free]
        pairs.append((flat[:n_c].reshape(C_mid.shape), flat[n_c:].reshape(D_mid.shape)))
    return unique_pairs(pairs)
