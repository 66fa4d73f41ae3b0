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

"""Online tube problem: assembly into standard conic form, solution extraction and
validation, size statistics."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union
import logging

import numpy as np

from src.config import COST_DECREASE_SLACK, VALIDATION_TOL
from src.tube_mpc.conic import SolveResult
from src.tube_mpc.errors import AssemblyError, DimensionError, ValidationFailed
from src.tube_mpc.geometry import FloatArray, HPolytope, as_vector, tightening_norms, v_norm
from src.tube_mpc.linearize import NominalTrajectory, StepLinearization
from src.tube_mpc.model import ProblemData
from src.tube_mpc.program import Affine, ConeBlock, ConicProgram, ProgramBuilder
from src.tube_mpc.terminal import TerminalParams, build_omega_blocks, terminal_cost_blocks

__all__ = [
    "Affine",
    "ConeBlock",
    "ConicProgram",
    "CostDecrease",
    "ProgramBuilder",
    "SizeStats",
    "TubeSolution",
    "assemble",
    "check_problem_rows",
    "count_constraints",
    "dump",
    "extract",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostDecrease:
    """Inputs of the cost-decrease row.

    At the first iteration of a step after t = 0, `prev_J_final`, `prev_stage_cost`
    and `prev_sigma_hat` are set; at later iterations only `prev_iter_J`.
    """

    prev_J_final: Optional[float] = None
    prev_stage_cost: Optional[float] = None
    prev_sigma_hat: Optional[float] = None
    prev_iter_J: Optional[float] = None


@dataclass
class TubeSolution:
    """Optimal tube of the online problem.

    Attributes:
        v_star (FloatArray): Perturbation updates, shape (N, n_u).
        z_star (FloatArray): Tube centers relative to the nominal, shape (N + 1, n_x).
        beta_star (FloatArray): Radii beta_0..beta_{N + N_hat}.
        l_star (FloatArray): Cost terms l_0..l_{N + N_hat}.
        J_bar (float): Objective bound.
        r_star (float): Epigraph value of ||z_N||_V.
        slack (float): Constraint slack, zero unless the problem was relaxed.
    """

    v_star: FloatArray
    z_star: FloatArray
    beta_star: FloatArray
    l_star: FloatArray
    J_bar: float
    r_star: float
    slack: float = 0.0

    @property
    def v_norm_max(self) -> float:
        """Largest Euclidean norm over the steps of v_star."""
        if self.v_star.size == 0:
            return 0.0
        return float(np.linalg.norm(self.v_star, axis=1).max())


@dataclass
class SizeStats:
    n_vars: int = 0
    n_linear_rows: int = 0
    n_equality_rows: int = 0
    n_soc_blocks: int = 0
    assembly_time: float = 0.0
    solve_time: float = 0.0


def _tightened_rows(
    builder: ProgramBuilder,
    poly: HPolytope,
    center: Affine,
    M: FloatArray,
    beta_k: Affine,
    V_inv_sqrt: FloatArray,
    tag: str,
) -> None:
    """Rows H center + beta_k ||V^{-1/2} (H M)^T|| <= h, where M maps the tube error
    into the space of `center`."""
    if poly.n_rows == 0:
        return
    norms = tightening_norms(poly.H @ M, V_inv_sqrt=V_inv_sqrt).reshape(-1, 1)
    builder.add_le(poly.H @ center + norms @ beta_k - poly.h, tag, relaxable=True)


def _check_cost_decrease(cd: CostDecrease, iteration: int) -> None:
    if iteration < 1:
        raise AssemblyError(f"Iterations are counted from 1, got {iteration}")
    if iteration == 1:
        if cd.prev_iter_J is not None:
            raise AssemblyError("The first iteration takes the previous step's cost, not J^(i-1)")
        if cd.prev_J_final is not None and (cd.prev_stage_cost is None or cd.prev_sigma_hat is None):
            raise AssemblyError("The previous step's cost needs its stage cost and sigma_hat")
    else:
        if cd.prev_iter_J is None:
            raise AssemblyError(f"Iteration {iteration} needs the previous iteration's cost")
        if cd.prev_J_final is not None:
            raise AssemblyError(f"Iteration {iteration} takes J^(i-1), not the previous step's cost")


def assemble(
    pd: ProblemData,
    traj: NominalTrajectory,
    lins: List[StepLinearization],
    params: TerminalParams,
    x_plant: FloatArray,
    cost_decrease: Optional[CostDecrease] = None,
    iteration: int = 1,
    relaxed: bool = False,
    certainty: bool = False,
) -> ConicProgram:
    """Builds the online tube problem around a nominal trajectory.

    Args:
        pd (ProblemData): Control problem.
        traj (NominalTrajectory): Nominal trajectory.
        lins (List[StepLinearization]): Linearization of every step k < N.
        params (TerminalParams): Terminal design with the horizon for this
            trajectory set.
        x_plant (FloatArray): Measured plant state.
        cost_decrease (Optional[CostDecrease], optional): Cost-decrease inputs; no row
            is added at the first iteration of t = 0. Defaults to None.
        iteration (int, optional): Outer iteration index, from 1. Defaults to 1.
        relaxed (bool, optional): Adds a minimized slack to the constraint rows.
            Defaults to False.
        certainty (bool, optional): Pins beta_0 to zero. Defaults to False.

    Raises:
        AssemblyError: Inconsistent cost-decrease inputs.
        DimensionError: Linearizations do not cover the horizon.

    Returns:
        ConicProgram: Standard-form program; `meta` records x0N_norm.
    """
    m, N = pd.model, pd.N
    n_x, n_u = m.n_x, m.n_u
    if len(lins) != N or traj.N != N:
        raise DimensionError(f"Expected {N} steps, got {len(lins)} linearizations and {traj.N} steps")
    cd = cost_decrease or CostDecrease()
    _check_cost_decrease(cd, iteration)

    V, K = params.V, params.K
    V_sqrt, V_inv_sqrt = params.V_sqrt, params.V_inv_sqrt
    Q_half = np.linalg.cholesky(pd.Q).T
    R_half = np.linalg.cholesky(pd.R).T
    qhat = params.qhat_norm(pd.Q, pd.R)
    eye_x = np.eye(n_x)
    x0N_norm = v_norm(traj.x0[N], V)

    b = ProgramBuilder(relaxed=relaxed)
    z = b.add_variable("z", (N + 1) * n_x)
    v = b.add_variable("v", N * n_u)
    beta = b.add_variable("beta", N + 1)
    aux = b.add_variable("tube_aux", N)
    stage = b.add_variable("stage_cost", N)
    r = b.add_variable("r", 1)
    J = b.add_variable("J", 1)

    def z_at(k: int) -> Affine:
        return z[k * n_x:(k + 1) * n_x]

    def v_at(k: int) -> Affine:
        return v[k * n_u:(k + 1) * n_u]

    for k, lin in enumerate(lins):
        zk, vk, bk = z_at(k), v_at(k), beta[k]
        b.add_eq(z_at(k + 1) - lin.Phi @ zk - lin.B @ vk, f"dynamics_{k}")
        growth = Affine.vstack([float(np.sqrt(lin.lam)) * bk, Affine.constant(params.sigma)])
        b.add_soc(aux[k], growth, f"tube_aux_{k}")
        for j, (C, D) in enumerate(lin.cd_pairs):
            linear = C @ zk + D @ vk
            for q, delta0 in enumerate(lin.delta0_vertices):
                b.add_soc(beta[k + 1] - aux[k], V_sqrt @ (linear + delta0), f"tube_{k}_{j}_{q}")

        x_k = zk + traj.x0[k]
        u_k = K @ zk + vk + (K @ traj.x0[k] + traj.v0[k])
        b.add_soc(
            stage[k] - qhat * bk,
            Affine.vstack([Q_half @ x_k, R_half @ u_k]),
            f"stage_cost_{k}",
        )
        _tightened_rows(b, pd.U, u_k, K, bk, V_inv_sqrt, f"input_{k}")
        _tightened_rows(b, pd.X, x_k, eye_x, bk, V_inv_sqrt, f"state_{k}")
        _tightened_rows(b, pd.S, zk, eye_x, bk, V_inv_sqrt, f"perturbation_{k}")
        if not pd.Vset.is_full_space():
            b.add_le(pd.Vset.H @ (vk + traj.v0[k]) - pd.Vset.h, f"input_perturbation_{k}", relaxable=True)

    b.add_soc(beta[0], V_sqrt @ (z_at(0) + (traj.x0[0] - as_vector(x_plant))), "initial")
    if certainty:
        b.add_le(beta[0], "certainty_initial")

    beta_N = beta[N]
    beta_t = build_omega_blocks(b, params, x0N_norm, r, beta_N, z_N=z_at(N))
    terminal = terminal_cost_blocks(params, x0N_norm, r, beta_N, beta_t)
    terminal_vec = Affine.vstack([t if isinstance(t, Affine) else Affine.constant(t) for t in terminal])
    costs = Affine.vstack([stage, terminal_vec])
    b.add_soc(J + 1.0, Affine.vstack([2.0 * costs, J - 1.0]), "objective_epigraph")

    if iteration == 1 and cd.prev_J_final is not None:
        bound = cd.prev_J_final - cd.prev_stage_cost + cd.prev_sigma_hat ** 2
        b.add_le(J - bound - COST_DECREASE_SLACK * (1.0 + abs(bound)), "cost_decrease")
    elif iteration > 1:
        bound = float(cd.prev_iter_J)
        b.add_le(J - bound - COST_DECREASE_SLACK * (1.0 + abs(bound)), "cost_decrease")

    b.expose("terminal_cost", terminal_vec)
    b.expose("beta_all", Affine.vstack([beta, beta_t]) if params.N_hat else beta)
    b.minimize(J)
    program = b.build()
    program.meta.update({"x0N_norm": x0N_norm, "N_hat": float(params.N_hat), "qhat": qhat})
    return program


def extract(program: ConicProgram, result: SolveResult, tol: float = VALIDATION_TOL) -> TubeSolution:
    """Reads the named blocks of an optimal solution and validates every row.

    Raises:
        ValidationFailed: The solve was not optimal or a row is violated beyond
            `tol` after scaling.
    """
    if not result.optimal or result.x is None:
        raise ValidationFailed("solver_status", float("inf"))
    x = result.x
    tag, worst = program.worst_violation(x)
    if worst > tol:
        raise ValidationFailed(tag, worst)
    stage = program.value(x, "stage_cost")
    N = stage.shape[0]
    z = program.value(x, "z")
    v = program.value(x, "v")
    slack = float(program.value(x, "slack")[0]) if "slack" in program.index else 0.0
    return TubeSolution(
        v_star=v.reshape(N, -1),
        z_star=z.reshape(N + 1, -1),
        beta_star=program.output(x, "beta_all"),
        l_star=np.concatenate([stage, program.output(x, "terminal_cost")]),
        J_bar=float(program.value(x, "J")[0]),
        r_star=float(program.value(x, "r")[0]),
        slack=slack,
    )


def _scaled(lhs: float, rhs: float) -> float:
    return float((lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))


def check_problem_rows(
    pd: ProblemData,
    traj: NominalTrajectory,
    lins: List[StepLinearization],
    params: TerminalParams,
    x_plant: FloatArray,
    sol: TubeSolution,
    cost_decrease: Optional[CostDecrease] = None,
    iteration: int = 1,
) -> List[Tuple[str, float]]:
    """Re-evaluates every row of the online problem from its definition.

    Independent of the assembled matrices, so it checks the assembly as well as
    the solver. Relaxable rows are allowed the solution's slack.

    Returns:
        List[Tuple[str, float]]: (row tag, scaled violation); positive values are
            violations.
    """
    N, V, K = pd.N, params.V, params.K
    V_sqrt, V_inv_sqrt = params.V_sqrt, params.V_inv_sqrt
    Q_half = np.linalg.cholesky(pd.Q).T
    R_half = np.linalg.cholesky(pd.R).T
    qhat = params.qhat_norm(pd.Q, pd.R)
    z, v, beta, costs = sol.z_star, sol.v_star, sol.beta_star, sol.l_star
    slack = sol.slack
    rows: List[Tuple[str, float]] = []

    def tightened(poly: HPolytope, center: FloatArray, M: FloatArray, radius: float, tag: str) -> None:
        if poly.n_rows == 0:
            return
        norms = tightening_norms(poly.H @ M, V, V_inv_sqrt)
        for lhs, rhs in zip(poly.H @ center + radius * norms, poly.h + slack):
            rows.append((tag, _scaled(lhs, rhs)))

    for k, lin in enumerate(lins):
        residual = z[k + 1] - lin.Phi @ z[k] - lin.B @ v[k]
        rows.append((f"dynamics_{k}", float(np.abs(residual).max() / (1.0 + np.abs(z[k + 1]).max()))))
        growth = np.sqrt(lin.lam * beta[k] ** 2 + params.sigma ** 2)
        for C, D in lin.cd_pairs:
            for delta0 in lin.delta0_vertices:
                offset = float(np.linalg.norm(V_sqrt @ (C @ z[k] + D @ v[k] + delta0)))
                rows.append((f"tube_{k}", _scaled(growth + offset, beta[k + 1])))
        x_k = traj.x0[k] + z[k]
        u_k = K @ x_k + traj.v0[k] + v[k]
        stage = float(np.linalg.norm(np.concatenate([Q_half @ x_k, R_half @ u_k])))
        rows.append((f"stage_cost_{k}", _scaled(stage + qhat * beta[k], costs[k])))
        tightened(pd.U, u_k, K, beta[k], f"input_{k}")
        tightened(pd.X, x_k, np.eye(pd.model.n_x), beta[k], f"state_{k}")
        tightened(pd.S, z[k], np.eye(pd.model.n_x), beta[k], f"perturbation_{k}")
        if not pd.Vset.is_full_space():
            for lhs, rhs in zip(pd.Vset.H @ (traj.v0[k] + v[k]), pd.Vset.h + slack):
                rows.append((f"input_perturbation_{k}", _scaled(lhs, rhs)))

    initial = v_norm(traj.x0[0] + z[0] - as_vector(x_plant), V)
    rows.append(("initial", _scaled(initial, beta[0])))

    x0N_norm = v_norm(traj.x0[N], V)
    lh, r = float(params.lambda_hat), sol.r_star
    rows.append(("omega_epigraph", _scaled(v_norm(z[N], V), r)))
    rows.append(("omega_cap", _scaled(beta[N] + r + x0N_norm, params.rho_hat + slack)))
    offset = r * params.d_Phi + params.d_Theta * params.lipschitz_V * x0N_norm
    for k in range(1, params.N_hat + 1):
        lower = np.sqrt(lh * beta[N + k - 1] ** 2 + params.sigma ** 2) + lh ** ((k - 1) / 2) * offset
        rows.append((f"omega_cone_{k}", _scaled(lower, beta[N + k])))
        upper = params.rho_hat - lh ** (k / 2) * (r + x0N_norm)
        rows.append((f"omega_cap_{k}", _scaled(beta[N + k], upper + slack)))

    terminal = terminal_cost_blocks(params, x0N_norm, r, beta[N], beta[N + 1:])
    rows.append(("terminal_cost", float(np.abs(np.asarray(terminal, dtype=float) - costs[N:]).max())))
    rows.append(("objective_epigraph", _scaled(float(np.sum(costs ** 2)), sol.J_bar)))

    cd = cost_decrease or CostDecrease()
    bound: Optional[float] = None
    if iteration == 1 and cd.prev_J_final is not None:
        bound = cd.prev_J_final - cd.prev_stage_cost + cd.prev_sigma_hat ** 2
    elif iteration > 1 and cd.prev_iter_J is not None:
        bound = cd.prev_iter_J
    if bound is not None:
        rows.append(("cost_decrease", _scaled(sol.J_bar, bound + COST_DECREASE_SLACK * (1.0 + abs(bound)))))
    return rows


def count_constraints(
    program: ConicProgram, assembly_time: float = 0.0, solve_time: float = 0.0
) -> SizeStats:
    return SizeStats(
        n_vars=program.n_vars,
        n_linear_rows=program.n_linear_rows,
        n_equality_rows=program.n_equality_rows,
        n_soc_blocks=len(program.cones),
        assembly_time=assembly_time,
        solve_time=solve_time,
    )


def dump(program: ConicProgram, path: Union[str, Path]) -> Path:
    """Writes the plain-text form of `program` for external verification."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(program.to_text())
    logger.info(f"Program with {program.n_vars} variables written to {path}")
    return path
