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

"""Terminal ingredients of the tube controller.

Offline, a linear difference inclusion (LDI) bounding the dynamics on the terminal
region is built and an LMI yields the tube shape `V`, the feedback gain `K` and the
disturbance radius `sigma`. Online, the terminal set and cost over a horizon `N_hat`
beyond the prediction horizon are emitted as cone blocks into a `ProgramBuilder`.
"""

from dataclasses import dataclass, replace
from functools import cached_property
from itertools import combinations, product
from typing import List, Optional, Sequence, Tuple, Union
import logging

import cvxpy as cp
import numpy as np

from src.config import GAMMA_RULE, HORIZON_METHOD, LMI_MIN_EIG, N_HAT_MAX, SIGMA_FLOOR
from src.tube_mpc.conic import SolverSettings, SolveStatus, solve_sdp, solve_socp
from src.tube_mpc.errors import ModelError, TerminalDesignError
from src.tube_mpc.geometry import (
    FloatArray,
    HPolytope,
    VPolytope,
    as_matrix,
    bounding_box,
    hull_contains,
    induced_v_norm,
    matrix_inv_sqrt,
    matrix_sqrt,
    tightening_norms,
    vertices,
)
from src.tube_mpc.model import (
    BasisModel,
    ProblemData,
    constant_shift_vertices,
    interval_extremes,
    unique_pairs,
)
from src.tube_mpc.program import Affine, ProgramBuilder

logger = logging.getLogger(__name__)

Expr = Union[Affine, float]


@dataclass(frozen=True)
class LDIModel:
    """Vertex systems (A_hat, B_hat) whose hull contains the model Jacobians on the
    region Xhat x Uhat for every parameter in the design set.

    Attributes:
        pairs (List[Tuple[FloatArray, FloatArray]]): Vertex pairs (A_hat, B_hat).
        Xhat (HPolytope): State region.
        Uhat (HPolytope): Input region.
    """

    pairs: List[Tuple[FloatArray, FloatArray]]
    Xhat: HPolytope
    Uhat: HPolytope

    def __len__(self) -> int:
        return len(self.pairs)

    def closed_loop(self, K: FloatArray) -> List[FloatArray]:
        return [A + B @ K for A, B in self.pairs]

    def contains(self, Jx: FloatArray, Ju: FloatArray, tol: float = 1e-7) -> bool:
        points = np.stack([np.concatenate([A.ravel(), B.ravel()]) for A, B in self.pairs])
        return hull_contains(points, np.concatenate([Jx.ravel(), Ju.ravel()]), tol)


@dataclass(frozen=True)
class TerminalParams:
    """Terminal design: tube shape, gain and the scalars of the terminal set and cost.

    Attributes:
        V (FloatArray): Tube shape matrix.
        K (FloatArray): Feedback gain.
        sigma (float): Disturbance radius in the V-norm.
        lambda_hat (float): Contraction factor of the LDI in the V-norm, in [0, 1).
        d_Theta (float): 1-norm diameter of the parameter set.
        d_Phi (float): Largest V-norm distance between closed-loop LDI vertices.
        rho_hat (float): Largest V-ball radius inside the aggregate constraint set.
        gamma (float): Terminal cost weight.
        lipschitz_L (float): Euclidean Lipschitz constant of the parameter bases.
        Hbar (FloatArray): Aggregate constraint rows.
        hbar (FloatArray): Aggregate constraint offsets.
        N_hat (int): Terminal horizon.
        sigma_hat (float): Terminal cost-decrease bound for the current horizon.
    """

    V: FloatArray
    K: FloatArray
    sigma: float
    lambda_hat: float
    d_Theta: float
    d_Phi: float
    rho_hat: float
    gamma: float
    lipschitz_L: float
    Hbar: FloatArray
    hbar: FloatArray
    N_hat: int = 1
    sigma_hat: float = 0.0

    @cached_property
    def V_sqrt(self) -> FloatArray:
        return matrix_sqrt(self.V)

    @cached_property
    def V_inv_sqrt(self) -> FloatArray:
        return matrix_inv_sqrt(self.V)

    @cached_property
    def lipschitz_V(self) -> float:
        """Lipschitz constant measured in the V-norm, L * cond(V^{1/2})."""
        eig = np.linalg.eigvalsh(self.V)
        return float(self.lipschitz_L * np.sqrt(eig.max() / eig.min()))

    def qhat_norm(self, Q: FloatArray, R: FloatArray) -> float:
        """||V^{-1/2}||_Qhat = lambda_max(V^{-1/2} Qhat V^{-1/2})^{1/2}."""
        G = self.V_inv_sqrt @ qhat_matrix(Q, R, self.K) @ self.V_inv_sqrt
        return float(np.sqrt(np.linalg.eigvalsh(0.5 * (G + G.T)).max()))

    def with_horizon(self, N_hat: int, sigma_hat: float) -> "TerminalParams":
        return replace(self, N_hat=N_hat, sigma_hat=sigma_hat)

    def certainty(self) -> "TerminalParams":
        """Same design with the disturbance and parameter uncertainty removed."""
        return replace(self, sigma=0.0, d_Theta=0.0, sigma_hat=0.0)


def qhat_matrix(Q: FloatArray, R: FloatArray, K: FloatArray) -> FloatArray:
    K = as_matrix(K)
    return np.asarray(as_matrix(Q) + K.T @ as_matrix(R) @ K)


def build_ldi(
    m: BasisModel,
    Xhat: HPolytope,
    Uhat: HPolytope,
    Theta0: Union[HPolytope, VPolytope],
) -> LDIModel:
    """LDI vertex pairs of the model Jacobians over Xhat x Uhat x Theta0.

    Args:
        m (BasisModel): Dynamics.
        Xhat (HPolytope): State region, simplex or box template.
        Uhat (HPolytope): Input region; the full space is allowed for input-free
            Jacobians.
        Theta0 (Union[HPolytope, VPolytope]): Parameter set.

    Raises:
        ModelError: The Jacobians cannot be bounded on the region.

    Returns:
        LDIModel: Deduplicated vertex pairs.
    """
    Theta = Theta0 if isinstance(Theta0, VPolytope) else vertices(Theta0)
    if not m.jacobians_input_free and Uhat.is_full_space():
        raise ModelError("Input-dependent Jacobians need a bounded Uhat")

    if m.vertex_attained:
        x_points = vertices(Xhat).vertices
        if m.jacobians_input_free:
            u_points = np.zeros((1, m.n_u))
        else:
            u_points = vertices(Uhat).vertices
        pairs = [m.jacobians(x, u, theta) for x, u, theta in product(x_points, u_points, Theta.vertices)]
        return LDIModel(unique_pairs(pairs), Xhat, Uhat)

    if m.jacobian_interval is None:
        raise ModelError("Model provides neither vertex-attained nor interval Jacobian bounds")
    x_box = bounding_box(Xhat)
    u_box = np.zeros((2, m.n_u)) if m.jacobians_input_free else bounding_box(Uhat)
    Jx_lo, Jx_hi, Ju_lo, Ju_hi = m.jacobian_interval(
        x_box[0], x_box[1], u_box[0], u_box[1],
        Theta.vertices.min(axis=0), Theta.vertices.max(axis=0),
    )
    zero_K = np.zeros((m.n_u, m.n_x))
    pairs = interval_extremes(
        Jx_lo, Jx_hi, Ju_lo, Ju_hi, zero_K, np.zeros((m.n_x, m.n_x)), np.zeros((m.n_x, m.n_u))
    )
    return LDIModel(pairs, Xhat, Uhat)


def design_disturbances(pd: ProblemData, Theta: VPolytope) -> FloatArray:
    """Vertices of W plus the constant-basis shifts, deduplicated."""
    W = pd.W.vertices
    if not pd.model.constant_basis:
        return W
    shifts = constant_shift_vertices(pd.model, Theta)
    sums = (W[:, None, :] + shifts[None, :, :]).reshape(-1, W.shape[1])
    return np.asarray(np.unique(sums, axis=0))


def _lmi_blocks(
    pairs: Sequence[Tuple[FloatArray, FloatArray]],
    W_vertices: FloatArray,
    S: cp.Variable,
    Y: cp.Variable,
    tau: cp.Variable,
    Q_inv: FloatArray,
    R_inv: FloatArray,
) -> List[cp.Expression]:
    n, m = Y.shape[1], Y.shape[0]
    tau_block = cp.reshape(tau, (1, 1))
    blocks = []
    for A, B in pairs:
        ASBY = A @ S + B @ Y
        for w in W_vertices:
            w_col = w.reshape(n, 1)
            blocks.append(
                cp.bmat(
                    [
                        [S, np.zeros((n, 1)), ASBY.T, S, Y.T],
                        [np.zeros((1, n)), tau_block, w_col.T, np.zeros((1, n)), np.zeros((1, m))],
                        [ASBY, w_col, S, np.zeros((n, n)), np.zeros((n, m))],
                        [S, np.zeros((n, 1)), np.zeros((n, n)), Q_inv, np.zeros((n, m))],
                        [Y, np.zeros((m, 1)), np.zeros((m, n)), np.zeros((m, n)), R_inv],
                    ]
                )
            )
    return blocks


def _lmi_problem(
    pairs: Sequence[Tuple[FloatArray, FloatArray]],
    W_vertices: FloatArray,
    Q: FloatArray,
    R: FloatArray,
    settings: Optional[SolverSettings],
) -> Tuple[SolveStatus, cp.Variable, cp.Variable, cp.Variable]:
    n, m = pairs[0][1].shape
    S = cp.Variable((n, n), symmetric=True)
    Y = cp.Variable((m, n))
    tau = cp.Variable(nonneg=True)
    blocks = _lmi_blocks(pairs, W_vertices, S, Y, tau, np.linalg.inv(Q), np.linalg.inv(R))
    result = solve_sdp(tau, blocks, [S >> LMI_MIN_EIG * np.eye(n)], settings)
    return result.status, S, Y, tau


def solve_terminal_lmi(
    ldi: LDIModel,
    W_vertices: FloatArray,
    Q: FloatArray,
    R: FloatArray,
    settings: Optional[SolverSettings] = None,
) -> Tuple[FloatArray, FloatArray, float]:
    """Minimizes tau over (S, Y, tau) subject to the cost-decrease LMI at every
    (LDI vertex, disturbance vertex) pair.

    Args:
        ldi (LDIModel): Vertex systems.
        W_vertices (FloatArray): Disturbance vertices, one per row.
        Q (FloatArray): State weight.
        R (FloatArray): Input weight.
        settings (Optional[SolverSettings], optional): Backend settings.
            Defaults to None.

    Raises:
        TerminalDesignError: The LMI is infeasible; `vertex` names the first LDI
            vertex that is infeasible on its own, when there is one.

    Returns:
        Tuple[FloatArray, FloatArray, float]: V = S^{-1}, K = Y V and sigma = tau^{1/2}.
    """
    Q, R = as_matrix(Q), as_matrix(R)
    W_vertices = as_matrix(W_vertices)
    status, S, Y, tau = _lmi_problem(ldi.pairs, W_vertices, Q, R, settings)
    if status is not SolveStatus.OPTIMAL:
        vertex = None
        for j, pair in enumerate(ldi.pairs):
            if _lmi_problem([pair], W_vertices, Q, R, settings)[0] is not SolveStatus.OPTIMAL:
                vertex = j
                break
        raise TerminalDesignError(f"Terminal LMI not solved ({status.name})", vertex=vertex)

    S_val = 0.5 * (S.value + S.value.T)
    V = np.linalg.inv(S_val)
    V = 0.5 * (V + V.T)
    K = Y.value @ V
    sigma = float(np.sqrt(max(float(tau.value), 0.0)))
    # the tube certificate needs ||w||_V < sigma strictly; solver tolerance can land on equality
    w_max = max(float(np.sqrt(max(w @ V @ w, 0.0))) for w in W_vertices)
    if w_max > 0 and sigma <= w_max * (1.0 + SIGMA_FLOOR):
        logger.debug(f"sigma raised from {sigma:.6g} to clear ||w||_V = {w_max:.6g}")
        sigma = w_max * (1.0 + SIGMA_FLOOR)
    logger.info(f"Terminal LMI solved: sigma = {sigma:.4g}, {len(ldi)} LDI vertices")
    return V, K, sigma


def parameter_diameter(Theta: VPolytope) -> float:
    """Largest 1-norm distance between two parameter vertices."""
    pts = Theta.vertices
    if len(pts) < 2:
        return 0.0
    return float(max(np.abs(a - b).sum() for a, b in combinations(pts, 2)))


def terminal_scalars(
    V: FloatArray,
    K: FloatArray,
    Q: FloatArray,
    R: FloatArray,
    Theta: VPolytope,
    ldi: LDIModel,
    Hbar: FloatArray,
    hbar: FloatArray,
    gamma_rule: str = GAMMA_RULE,
) -> Tuple[float, float, float, float, float]:
    """Scalars of the terminal set and cost.

    Args:
        V (FloatArray): Tube shape matrix.
        K (FloatArray): Feedback gain.
        Q (FloatArray): State weight.
        R (FloatArray): Input weight.
        Theta (VPolytope): Parameter set.
        ldi (LDIModel): Vertex systems.
        Hbar (FloatArray): Aggregate constraint rows.
        hbar (FloatArray): Aggregate constraint offsets.
        gamma_rule (str, optional): "lemma" for gamma^2 = 1 / (1 - lambda_hat^{1/2}),
            "algorithm" for gamma = 2 ||V^{-1/2}||^2_Qhat / (1 - lambda_hat^{1/2}).
            Defaults to GAMMA_RULE.

    Raises:
        TerminalDesignError: lambda_hat >= 1, no aggregate rows, or a nonpositive
            constraint offset.

    Returns:
        Tuple[float, float, float, float, float]: (lambda_hat, d_Theta, d_Phi,
            gamma, rho_hat).
    """
    V_is = matrix_inv_sqrt(V)
    G = V_is @ qhat_matrix(Q, R, K) @ V_is
    eig = np.linalg.eigvalsh(0.5 * (G + G.T))
    lambda_hat = 1.0 - float(eig.min())
    if lambda_hat >= 1.0:
        raise TerminalDesignError(f"lambda_hat = {lambda_hat:.6g} is not below 1")
    lambda_hat = max(lambda_hat, 0.0)

    d_Theta = parameter_diameter(Theta)
    closed = ldi.closed_loop(K)
    d_Phi = max(
        (induced_v_norm(P1 - P2, V) for P1, P2 in combinations(closed, 2)), default=0.0
    )

    denom = 1.0 - np.sqrt(lambda_hat)
    if gamma_rule == "lemma":
        gamma = float(np.sqrt(1.0 / denom))
    elif gamma_rule == "algorithm":
        logger.warning("Using the gamma rule 2 ||V^{-1/2}||^2_Qhat / (1 - lambda_hat^{1/2})")
        gamma = float(2.0 * eig.max() / denom)
    else:
        raise ValueError(f"Unknown gamma rule '{gamma_rule}'")

    if Hbar.shape[0] == 0:
        raise TerminalDesignError("Aggregate constraint set has no rows, rho_hat is unbounded")
    if np.any(hbar <= 0):
        raise TerminalDesignError("Aggregate constraint set does not contain the origin")
    # ||Hbar_i||_{V^{-1}} is the row's tightening norm
    rho_hat = float(np.min(hbar / tightening_norms(Hbar, V)))
    return lambda_hat, d_Theta, float(d_Phi), gamma, rho_hat


def build_omega_blocks(
    builder: ProgramBuilder,
    params: TerminalParams,
    x0N_norm: float,
    r: Affine,
    beta_N: Affine,
    z_N: Optional[Affine] = None,
    N_hat: Optional[int] = None,
) -> Affine:
    """Adds the terminal set rows for (r, beta_N) and returns beta_{N+1..N+N_hat}.

    Emits r >= ||z_N||_V (r >= 0 when `z_N` is omitted), the cap
    beta_N <= rho_hat - r - x0N_norm and, for k = 1..N_hat, one cone
    ||(lambda_hat^{1/2} beta_{N+k-1}, sigma)|| <= beta_{N+k} - lambda_hat^{(k-1)/2}
    (r d_Phi + d_Theta L x0N_norm) and one cap
    beta_{N+k} <= rho_hat - lambda_hat^{k/2} (r + x0N_norm).

    Args:
        builder (ProgramBuilder): Target program.
        params (TerminalParams): Terminal design.
        x0N_norm (float): ||x0_N||_V of the nominal terminal state.
        r (Affine): Epigraph variable of ||z_N||_V.
        beta_N (Affine): Tube radius at the end of the horizon.
        z_N (Optional[Affine], optional): Terminal perturbation state.
            Defaults to None.
        N_hat (Optional[int], optional): Terminal horizon, `params.N_hat` by default.

    Returns:
        Affine: The N_hat auxiliary radii (size 0 when N_hat = 0).
    """
    N_hat = params.N_hat if N_hat is None else N_hat
    lh, x = float(params.lambda_hat), float(x0N_norm)
    if z_N is None:
        builder.add_le(-r, "omega_epigraph")
    else:
        builder.add_soc(r, params.V_sqrt @ z_N, "omega_epigraph")
    builder.add_le(beta_N + r + (x - params.rho_hat), "omega_cap", relaxable=True)

    beta_t = builder.add_variable("beta_terminal", N_hat)
    offset = r * params.d_Phi + params.d_Theta * params.lipschitz_V * x
    chain = [beta_N] + [beta_t[k] for k in range(N_hat)]
    for k in range(1, N_hat + 1):
        growth = Affine.vstack([float(np.sqrt(lh)) * chain[k - 1], Affine.constant(params.sigma)])
        builder.add_soc(chain[k] - lh ** ((k - 1) / 2) * offset, growth, f"omega_cone_{k}")
        builder.add_le(
            chain[k] + lh ** (k / 2) * (r + x) - params.rho_hat, f"omega_cap_{k}", relaxable=True
        )
    return beta_t


def terminal_cost_blocks(
    params: TerminalParams,
    x0N_norm: float,
    r: Expr,
    beta_N: Expr,
    beta_terminal: Union[Affine, FloatArray],
    N_hat: Optional[int] = None,
) -> List[Expr]:
    """Terminal cost terms l_N, ..., l_{N+N_hat}.

    l_{N+k} = lambda_hat^{k/2} (x0N_norm + r) + beta_{N+k} for k < N_hat, and the
    last term is the same expression scaled by gamma. Accepts floats or affine
    expressions.
    """
    N_hat = params.N_hat if N_hat is None else N_hat
    lh = float(params.lambda_hat)
    chain = [beta_N] + [beta_terminal[k] for k in range(N_hat)]
    terms: List[Expr] = []
    for k in range(N_hat + 1):
        term = chain[k] + lh ** (k / 2) * (r + x0N_norm)
        terms.append(params.gamma * term if k == N_hat else term)
    return terms


def _horizon_check_socp(
    params: TerminalParams, x0N_norm: float, N_hat: int, settings: Optional[SolverSettings]
) -> Optional[float]:
    """Max of the one-step-beyond radius bound over the terminal set; None if empty."""
    builder = ProgramBuilder()
    r = builder.add_variable("r", 1)
    beta_N = builder.add_variable("beta_N", 1)
    beta_t = build_omega_blocks(builder, params, x0N_norm, r, beta_N, N_hat=N_hat)
    lh, x = float(params.lambda_hat), float(x0N_norm)
    bound = (
        float(np.sqrt(lh)) * beta_t[N_hat - 1]
        + params.sigma
        + lh ** (N_hat / 2) * (r * params.d_Phi + params.d_Theta * params.lipschitz_V * x)
        + lh ** ((N_hat + 1) / 2) * (r + x)
    )
    builder.minimize(-bound)
    result = solve_socp(builder.build(), settings)
    if result.status is SolveStatus.INFEASIBLE:
        return None
    if not result.optimal:
        raise TerminalDesignError(f"Terminal horizon check failed ({result.status.name})")
    return -float(result.objective)


def _minimal_chain_feasible(params: TerminalParams, x0N_norm: float, r: float, N_hat: int) -> bool:
    lh, x = float(params.lambda_hat), float(x0N_norm)
    if r + x > params.rho_hat:
        return False
    beta = 0.0
    offset = r * params.d_Phi + params.d_Theta * params.lipschitz_V * x
    for k in range(1, N_hat + 1):
        beta = np.sqrt(lh * beta ** 2 + params.sigma ** 2) + lh ** ((k - 1) / 2) * offset
        if beta > params.rho_hat - lh ** (k / 2) * (r + x):
            return False
    return True


def _horizon_check_recursion(params: TerminalParams, x0N_norm: float, N_hat: int) -> Optional[float]:
    """Closed form of the horizon check: the bound is maximal with beta_{N+N_hat} at
    its cap and the largest r that keeps the terminal set nonempty."""
    if not _minimal_chain_feasible(params, x0N_norm, 0.0, N_hat):
        return None
    lo, hi = 0.0, max(params.rho_hat - float(x0N_norm), 0.0)
    if not _minimal_chain_feasible(params, x0N_norm, hi, N_hat):
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _minimal_chain_feasible(params, x0N_norm, mid, N_hat):
                lo = mid
            else:
                hi = mid
    else:
        lo = hi
    lh = float(params.lambda_hat)
    return float(
        np.sqrt(lh) * params.rho_hat
        + params.sigma
        + lh ** (N_hat / 2) * (lo * params.d_Phi + params.d_Theta * params.lipschitz_V * x0N_norm)
    )


def horizon_check(
    params: TerminalParams,
    x0N_norm: float,
    N_hat: int,
    method: str = HORIZON_METHOD,
    settings: Optional[SolverSettings] = None,
) -> Optional[float]:
    if method == "socp":
        return _horizon_check_socp(params, x0N_norm, N_hat, settings)
    if method == "recursion":
        return _horizon_check_recursion(params, x0N_norm, N_hat)
    raise ValueError(f"Unknown horizon method '{method}'")


def horizon_sigma_hat(params: TerminalParams, x0N_norm: float, N_hat: int) -> float:
    lh = float(params.lambda_hat)
    return float(
        params.gamma * params.sigma
        + params.gamma
        * lh ** (N_hat / 2)
        * (params.d_Phi * params.rho_hat + params.d_Theta * params.lipschitz_V * x0N_norm)
    )


def find_terminal_horizon(
    params: TerminalParams,
    x0N_norm: float,
    method: str = HORIZON_METHOD,
    settings: Optional[SolverSettings] = None,
) -> Tuple[int, float]:
    """Smallest terminal horizon whose one-step-beyond bound stays below rho_hat.

    Doubles N_hat from 1 until the check passes, then bisects between the last
    failing and the first passing value.

    Args:
        params (TerminalParams): Terminal design.
        x0N_norm (float): ||x0_N||_V of the nominal terminal state.
        method (str, optional): "socp" solves the maximization as an SOCP,
            "recursion" uses its closed form. Defaults to HORIZON_METHOD.
        settings (Optional[SolverSettings], optional): Backend settings.
            Defaults to None.

    Raises:
        TerminalDesignError: The finiteness condition fails or no horizon up to
            N_HAT_MAX passes.

    Returns:
        Tuple[int, float]: (N_hat, sigma_hat).
    """
    check_finiteness(params)

    def passes(n: int) -> bool:
        value = horizon_check(params, x0N_norm, n, method, settings)
        if value is None:
            raise _EmptyTerminalSet()
        return value <= params.rho_hat

    try:
        hi = 1
        while not passes(hi):
            if hi >= N_HAT_MAX:
                raise TerminalDesignError(f"No terminal horizon up to {N_HAT_MAX} passes")
            hi = min(2 * hi, N_HAT_MAX)
        lo = hi // 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if passes(mid):
                hi = mid
            else:
                lo = mid
        N_hat = hi
    except _EmptyTerminalSet:
        logger.warning(f"Terminal set empty at ||x0_N||_V = {x0N_norm:.4g}, horizon check vacuous")
        N_hat = 1
    return N_hat, horizon_sigma_hat(params, x0N_norm, N_hat)


class _EmptyTerminalSet(Exception):
    pass


def check_finiteness(params: TerminalParams) -> None:
    """Raises unless the terminal radius recursion settles strictly inside rho_hat."""
    lh = float(params.lambda_hat)
    if params.sigma ** 2 / (1.0 - lh) >= params.rho_hat ** 2:
        raise TerminalDesignError(
            f"sigma^2 / (1 - lambda_hat) = {params.sigma ** 2 / (1.0 - lh):.4g} "
            f"is not below rho_hat^2 = {params.rho_hat ** 2:.4g}"
        )
    if params.sigma >= (1.0 - np.sqrt(lh)) * params.rho_hat:
        raise TerminalDesignError(
            f"sigma = {params.sigma:.4g} is not below (1 - lambda_hat^(1/2)) rho_hat"
        )


def sigma_bar(params: TerminalParams) -> float:
    """Bound gamma sigma + gamma rho_hat (d_Phi + d_Theta L) on the average cost."""
    return float(
        params.gamma * params.sigma
        + params.gamma * params.rho_hat * (params.d_Phi + params.d_Theta * params.lipschitz_V)
    )


def design_terminal(
    pd: ProblemData,
    Theta: Optional[Union[HPolytope, VPolytope]] = None,
    gamma_rule: str = GAMMA_RULE,
    method: str = HORIZON_METHOD,
    settings: Optional[SolverSettings] = None,
) -> TerminalParams:
    """Offline terminal design: LDI, LMI, scalars and the horizon at the origin.

    Args:
        pd (ProblemData): Control problem.
        Theta (Optional[Union[HPolytope, VPolytope]], optional): Parameter set,
            `pd.Theta0` by default.
        gamma_rule (str, optional): Terminal weight rule. Defaults to GAMMA_RULE.
        method (str, optional): Horizon check method. Defaults to HORIZON_METHOD.
        settings (Optional[SolverSettings], optional): Backend settings.
            Defaults to None.

    Raises:
        TerminalDesignError: Any design step fails.

    Returns:
        TerminalParams: Complete design.
    """
    if Theta is None:
        Theta = pd.Theta0
    Theta_v = Theta if isinstance(Theta, VPolytope) else vertices(Theta)
    ldi = build_ldi(pd.model, pd.Xhat, pd.Uhat, Theta_v)
    V, K, sigma = solve_terminal_lmi(ldi, design_disturbances(pd, Theta_v), pd.Q, pd.R, settings)
    Hbar, hbar = pd.aggregate_constraints(K)
    lambda_hat, d_Theta, d_Phi, gamma, rho_hat = terminal_scalars(
        V, K, pd.Q, pd.R, Theta_v, ldi, Hbar, hbar, gamma_rule
    )
    params = TerminalParams(
        V=V,
        K=K,
        sigma=sigma,
        lambda_hat=lambda_hat,
        d_Theta=d_Theta,
        d_Phi=d_Phi,
        rho_hat=rho_hat,
        gamma=gamma,
        lipschitz_L=pd.model.lipschitz_L,
        Hbar=Hbar,
        hbar=hbar,
    )
    N_hat, sigma_hat = find_terminal_horizon(params, 0.0, method, settings)
    logger.info(
        f"Terminal design: sigma = {sigma:.4g}, lambda_hat = {lambda_hat:.4g}, "
        f"rho_hat = {rho_hat:.4g}, N_hat = {N_hat}"
    )
    return params.with_horizon(N_hat, sigma_hat)


def refresh_for_parameter_set(
    params: TerminalParams,
    pd: ProblemData,
    Theta: VPolytope,
    resolve_lmi: bool = False,
    gamma_rule: str = GAMMA_RULE,
    settings: Optional[SolverSettings] = None,
) -> TerminalParams:
    """Terminal design for a shrunken parameter set.

    Only d_Theta is recomputed unless `resolve_lmi` is set, in which case the whole
    design is redone on `Theta`, its horizon and sigma_hat at the origin included.
    """
    if resolve_lmi:
        try:
            return design_terminal(pd, Theta, gamma_rule, settings=settings)
        except TerminalDesignError as exc:
            logger.warning(f"Online terminal redesign failed, keeping previous design: {exc}")
    return replace(params, d_Theta=parameter_diameter(Theta))
