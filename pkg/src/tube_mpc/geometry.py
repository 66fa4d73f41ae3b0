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
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from scipy.optimize import linprog

from src.config import MAX_BOX_VERTICES, MEMBERSHIP_TOL
from src.tube_mpc.errors import DimensionError, GeometryError

FloatArray = npt.NDArray[np.float64]


def as_vector(x: Union[float, Sequence[float], FloatArray]) -> FloatArray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def as_matrix(M: Union[float, Sequence[Sequence[float]], FloatArray]) -> FloatArray:
    return np.atleast_2d(np.asarray(M, dtype=float))


@dataclass(frozen=True)
class HPolytope:
    """Halfspace representation {x : Hx <= h}. A polytope with no rows is the full
    space of dimension `H.shape[1]`.

    Attributes:
        H (FloatArray): Facet normals, one per row.
        h (FloatArray): Facet offsets.
    """

    H: FloatArray
    h: FloatArray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.ndim != 2:
            raise DimensionError(f"H must be a matrix, got shape {H.shape}")
        if H.shape[0] != h.shape[0]:
            raise DimensionError(
                f"H has {H.shape[0]} rows but h has {h.shape[0]} entries"
            )
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return int(self.H.shape[1])

    @property
    def n_rows(self) -> int:
        return int(self.H.shape[0])

    def is_full_space(self) -> bool:
        return self.n_rows == 0

    @classmethod
    def box(cls, bound: Union[float, Sequence[float]], dim: int) -> "HPolytope":
        """Builds {x : -b <= x <= b} with rows [I; -I]."""
        b = np.broadcast_to(np.asarray(bound, dtype=float), (dim,))
        return cls(np.vstack([np.eye(dim), -np.eye(dim)]), np.concatenate([b, b]))

    @classmethod
    def simplex(cls, a: Union[float, Sequence[float]], b: float, dim: int) -> "HPolytope":
        """Builds {x : -x <= a, 1^T x <= b} with rows [-I; 1^T]."""
        a_vec = np.broadcast_to(np.asarray(a, dtype=float), (dim,))
        H = np.vstack([-np.eye(dim), np.ones((1, dim))])
        return cls(H, np.concatenate([a_vec, [float(b)]]))

    @classmethod
    def full_space(cls, dim: int) -> "HPolytope":
        return cls(np.zeros((0, dim)), np.zeros(0))


@dataclass(frozen=True)
class VPolytope:
    """Vertex representation co{v_1, ..., v_k}, vertices stored row-wise."""

    vertices: FloatArray

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        if V.ndim == 1:
            V = V.reshape(-1, 1)
        if V.ndim != 2 or V.shape[0] == 0:
            raise DimensionError("A vertex polytope needs at least one vertex")
        object.__setattr__(self, "vertices", V)

    @property
    def dim(self) -> int:
        return int(self.vertices.shape[1])

    def __len__(self) -> int:
        return int(self.vertices.shape[0])

    def mean(self) -> FloatArray:
        return np.asarray(self.vertices.mean(axis=0))


@dataclass(frozen=True)
class Ellipsoid:
    """E(V, beta^2) = {e : e^T V e <= beta^2}."""

    V: FloatArray
    beta2: float

    def __post_init__(self):
        V = as_matrix(self.V)
        check_spd(V)
        if self.beta2 < 0:
            raise GeometryError(f"Squared radius must be nonnegative, got {self.beta2}")
        object.__setattr__(self, "V", V)

    def contains(self, e: FloatArray, tol: float = MEMBERSHIP_TOL) -> bool:
        return bool(v_norm(e, self.V) ** 2 <= self.beta2 + tol)


def check_spd(V: FloatArray) -> None:
    """Raises `GeometryError` unless `V` is symmetric positive definite."""
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {V.shape}")
    if not np.allclose(V, V.T, atol=1e-10 * max(1.0, float(np.abs(V).max()))):
        raise GeometryError("Shape matrix is not symmetric")
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("Shape matrix is not positive definite") from exc


def v_norm(x: FloatArray, V: FloatArray) -> float:
    """Weighted norm ||x||_V = (x^T V x)^{1/2}.

    Args:
        x (FloatArray): Vector.
        V (FloatArray): Symmetric positive (semi)definite weight.

    Returns:
        float: Nonnegative norm value.
    """
    x = as_vector(x)
    V = as_matrix(V)
    if V.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(f"Vector of size {x.shape[0]} against weight {V.shape}")
    return float(np.sqrt(max(float(x @ V @ x), 0.0)))


def matrix_sqrt(V: FloatArray) -> FloatArray:
    """Symmetric square root through an eigendecomposition."""
    eigvals, eigvecs = np.linalg.eigh(as_matrix(V))
    if eigvals.min() < -MEMBERSHIP_TOL:
        raise GeometryError("Matrix square root of an indefinite matrix")
    return np.asarray((eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T)


def matrix_inv_sqrt(V: FloatArray) -> FloatArray:
    """Symmetric V^{-1/2}; `V` must be positive definite."""
    eigvals, eigvecs = np.linalg.eigh(as_matrix(V))
    if eigvals.min() <= MEMBERSHIP_TOL:
        raise GeometryError("V^{-1/2} requested for a matrix that is not positive definite")
    return np.asarray((eigvecs / np.sqrt(eigvals)) @ eigvecs.T)


def induced_v_norm(M: FloatArray, V: FloatArray) -> float:
    """Induced norm max ||Mx||_V / ||x||_V = lambda_max(V^{-1/2} M^T V M V^{-1/2})^{1/2}."""
    V_is = matrix_inv_sqrt(V)
    G = V_is @ M.T @ V @ M @ V_is
    return float(np.sqrt(max(float(np.linalg.eigvalsh(0.5 * (G + G.T)).max()), 0.0)))


def tightening_norms(
    H: FloatArray, V: Optional[FloatArray] = None, V_inv_sqrt: Optional[FloatArray] = None
) -> FloatArray:
    """Row-wise ||V^{-1/2} H_r^T||, the support of E(V, 1) along every row of `H`.

    A precomputed `V_inv_sqrt` is used as is; otherwise it is computed from `V`.
    """
    H = as_matrix(H)
    if H.shape[0] == 0:
        return np.zeros(0)
    if V_inv_sqrt is None:
        if V is None:
            raise GeometryError("Either V or V^{-1/2} is required")
        V_inv_sqrt = matrix_inv_sqrt(V)
    return np.asarray(np.linalg.norm(H @ V_inv_sqrt, axis=1))


def tighten_halfspace(
    H_row: FloatArray, h_row: float, z: FloatArray, V: FloatArray, beta: float
) -> float:
    """Slack of the halfspace {x : H_row x <= h_row} with respect to z + E(V, beta^2).

    Args:
        H_row (FloatArray): Halfspace normal.
        h_row (float): Halfspace offset.
        z (FloatArray): Ellipsoid center.
        V (FloatArray): Ellipsoid shape matrix, positive definite.
        beta (float): Ellipsoid radius, nonnegative.

    Returns:
        float: `h_row - H_row z - beta ||V^{-1/2} H_row^T||`, nonnegative iff the
            halfspace contains the whole ellipsoid.
    """
    if beta < 0:
        raise GeometryError(f"Tube radius must be nonnegative, got {beta}")
    H_row = as_vector(H_row)
    z = as_vector(z)
    V = as_matrix(V)
    check_spd(V)
    if H_row.shape != z.shape:
        raise DimensionError(f"Row of size {H_row.shape[0]} against point {z.shape[0]}")
    norm = float(tightening_norms(H_row.reshape(1, -1), V)[0])
    return float(h_row - H_row @ z - beta * norm)


def is_simplex_template(hp: HPolytope) -> bool:
    n = hp.dim
    if hp.n_rows != n + 1:
        return False
    return bool(
        np.array_equal(hp.H[:n], -np.eye(n)) and np.array_equal(hp.H[n], np.ones(n))
    )


def is_box_template(hp: HPolytope) -> bool:
    n = hp.dim
    if hp.n_rows != 2 * n:
        return False
    return bool(np.array_equal(hp.H, np.vstack([np.eye(n), -np.eye(n)])))


def simplex_vertices(hp: HPolytope) -> VPolytope:
    """Closed-form vertices of {theta : -theta <= a, 1^T theta <= b}.

    Vertex 0 is `-a`; vertex j replaces the j-th facet equality by the sum facet, so
    `theta_j = b + sum_{k != j} a_k`.

    Args:
        hp (HPolytope): Polytope with rows [-I; 1^T].

    Raises:
        GeometryError: `hp` is not in the simplex template or is empty.

    Returns:
        VPolytope: The n + 1 vertices.
    """
    if not is_simplex_template(hp):
        raise GeometryError("Polytope is not in the simplex template [-I; 1^T]")
    n = hp.dim
    a, b = hp.h[:n], hp.h[n]
    size = b + a.sum()
    if size < -MEMBERSHIP_TOL:
        raise GeometryError(f"Empty simplex (b + sum(a) = {size:.3e})")
    size = max(size, 0.0)
    vertices = np.tile(-a, (n + 1, 1))
    vertices[1:] += size * np.eye(n)
    return VPolytope(vertices)


def box_vertices(hp: HPolytope) -> VPolytope:
    """Vertices of {x : x <= ub, -x <= -lb} in the template [I; -I]."""
    if not is_box_template(hp):
        raise GeometryError("Polytope is not in the box template [I; -I]")
    n = hp.dim
    if 2 ** n > MAX_BOX_VERTICES:
        raise GeometryError(f"Box of dimension {n} has too many vertices")
    ub, lb = hp.h[:n], -hp.h[n:]
    if np.any(lb > ub + MEMBERSHIP_TOL):
        raise GeometryError("Empty box")
    corners = np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T
    return VPolytope(lb + corners * (ub - lb))


def vertices(hp: HPolytope) -> VPolytope:
    """Vertices of a simplex or box template polytope."""
    if is_simplex_template(hp):
        return simplex_vertices(hp)
    if is_box_template(hp):
        return box_vertices(hp)
    raise GeometryError("Vertex enumeration supports only the simplex and box templates")


def bounding_box(hp: HPolytope) -> FloatArray:
    """Returns a (2, n) array of lower and upper bounds of a template polytope."""
    V = vertices(hp).vertices
    return np.vstack([V.min(axis=0), V.max(axis=0)])


def contains_point(hp: HPolytope, x: FloatArray, tol: float = MEMBERSHIP_TOL) -> bool:
    x = as_vector(x)
    if x.shape[0] != hp.dim:
        raise DimensionError(f"Point of size {x.shape[0]} against polytope of dim {hp.dim}")
    if hp.is_full_space():
        return True
    return bool(np.all(hp.H @ x <= hp.h + tol))


def hull_distance(points: FloatArray, x: FloatArray) -> float:
    """Infinity-norm distance from `x` to co{points}, via one LP.

    Args:
        points (FloatArray): Generators, one per row (flattened matrices allowed).
        x (FloatArray): Query point.

    Returns:
        float: min_{lambda in simplex} ||points^T lambda - x||_inf.
    """
    P = np.asarray(points, dtype=float).reshape(len(points), -1)
    x = np.asarray(x, dtype=float).reshape(-1)
    k, n = P.shape
    # variables: lambda (k), t
    c = np.zeros(k + 1)
    c[-1] = 1.0
    A_ub = np.block(
        [[P.T, -np.ones((n, 1))], [-P.T, -np.ones((n, 1))]]
    )
    b_ub = np.concatenate([x, -x])
    A_eq = np.concatenate([np.ones(k), [0.0]]).reshape(1, -1)
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=[1.0],
        bounds=[(0, None)] * (k + 1),
        method="highs",
    )
    if res.status != 0:
        raise GeometryError(f"Hull membership LP failed: {res.message}")
    return float(res.fun)


def hull_contains(points: FloatArray, x: FloatArray, tol: float = 1e-7) -> bool:
    return hull_distance(points, x) <= tol
