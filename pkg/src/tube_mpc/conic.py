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

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import os
import time

import cvxpy as cp
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from src.config import (
    SDP_SOLVER_ENV,
    SDP_SOLVERS,
    SOCP_SOLVER_ENV,
    SOCP_SOLVERS,
    SOLVER_MAX_ITER,
    SOLVER_TIME_LIMIT,
    SOLVER_TOL,
)
from src.tube_mpc.errors import TubeMPCError
from src.tube_mpc.geometry import FloatArray
from src.tube_mpc.program import ConicProgram

logger = logging.getLogger(__name__)


class SolveStatus(Enum):
    OPTIMAL = auto()
    INFEASIBLE = auto()
    UNBOUNDED = auto()
    NUMERICAL_FAILURE = auto()
    TIME_LIMIT = auto()


@dataclass
class SolveResult:
    """Outcome of one conic or linear solve.

    Attributes:
        status (SolveStatus): Solver outcome.
        objective (Optional[float]): Optimal value, `None` unless optimal.
        x (Optional[FloatArray]): Primal vector, `None` unless optimal.
        solve_time (float): Wall time of the solver call in seconds.
        solver (str): Backend name.
        raw_status (str): Status string reported by the backend.
    """

    status: SolveStatus
    objective: Optional[float] = None
    x: Optional[FloatArray] = None
    solve_time: float = 0.0
    solver: str = ""
    raw_status: str = ""

    def __post_init__(self):
        if self.status is SolveStatus.OPTIMAL:
            if self.x is None or not np.all(np.isfinite(self.x)):
                self.status = SolveStatus.NUMERICAL_FAILURE
                self.objective = None

    @property
    def optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL


@dataclass
class SolverSettings:
    """Backend settings shared by every solve.

    Attributes:
        tol (float): Requested KKT residual tolerance.
        max_iter (int): Interior-point iteration limit.
        time_limit (float): Wall time limit in seconds.
        socp_solvers (List[str]): SOCP backends in order of preference.
        sdp_solvers (List[str]): SDP backends in order of preference.
        verbose (bool): Forwards solver output.
    """

    tol: float = SOLVER_TOL
    max_iter: int = SOLVER_MAX_ITER
    time_limit: float = SOLVER_TIME_LIMIT
    socp_solvers: List[str] = field(default_factory=lambda: list(SOCP_SOLVERS))
    sdp_solvers: List[str] = field(default_factory=lambda: list(SDP_SOLVERS))
    verbose: bool = False

    @classmethod
    def from_env(cls) -> "SolverSettings":
        """Settings with the preferred backends taken from the environment, if set."""
        settings = cls()
        if os.environ.get(SOCP_SOLVER_ENV):
            settings.socp_solvers.insert(0, os.environ[SOCP_SOLVER_ENV].upper())
        if os.environ.get(SDP_SOLVER_ENV):
            settings.sdp_solvers.insert(0, os.environ[SDP_SOLVER_ENV].upper())
        return settings


class ConicBackend:
    """Capability flags and solver choice for LP, SOC and PSD problems.

    LPs always go to HiGHS through scipy. Cone programs go to the installed cvxpy
    backends in order of preference; a numerical failure moves on to the next one.
    """

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        installed = set(cp.installed_solvers())
        self.socp_solvers = [s for s in dict.fromkeys(self.settings.socp_solvers) if s in installed]
        self.sdp_solvers = [s for s in dict.fromkeys(self.settings.sdp_solvers) if s in installed]

    @property
    def socp_solver(self) -> Optional[str]:
        return self.socp_solvers[0] if self.socp_solvers else None

    @property
    def sdp_solver(self) -> Optional[str]:
        return self.sdp_solvers[0] if self.sdp_solvers else None

    @property
    def lp(self) -> bool:
        return True

    @property
    def soc(self) -> bool:
        return self.socp_solver is not None

    @property
    def psd(self) -> bool:
        return self.sdp_solver is not None

    def solver_options(self, solver: str) -> Dict[str, Any]:
        s = self.settings
        if solver == "CLARABEL":
            return {
                "tol_gap_abs": s.tol,
                "tol_gap_rel": s.tol,
                "tol_feas": s.tol,
                "max_iter": s.max_iter,
                "time_limit": s.time_limit,
            }
        if solver == "ECOS":
            return {"abstol": s.tol, "reltol": s.tol, "feastol": s.tol, "max_iters": s.max_iter}
        if solver == "SCS":
            return {"eps_abs": s.tol, "eps_rel": s.tol, "time_limit_secs": s.time_limit}
        return {}

    def run(self, problem: cp.Problem, solver: Optional[str]) -> Tuple[SolveStatus, str, float]:
        if solver is None:
            raise TubeMPCError("No conic solver with the required capability is installed")
        start = time.perf_counter()
        try:
            problem.solve(solver=solver, verbose=self.settings.verbose, **self.solver_options(solver))
        except cp.error.SolverError as exc:
            logger.warning(f"{solver} failed: {exc}")
            return SolveStatus.NUMERICAL_FAILURE, "solver_error", time.perf_counter() - start
        elapsed = time.perf_counter() - start
        return map_status(problem.status, solver), str(problem.status), elapsed

    def run_chain(self, problem: cp.Problem, solvers: Sequence[str]) -> Tuple[SolveStatus, str, float, str]:
        """Runs `problem` on each solver in turn until one does not fail numerically.

        Args:
            problem (cp.Problem): Problem to solve.
            solvers (Sequence[str]): Installed backends in order of preference.

        Raises:
            TubeMPCError: No solver is given.

        Returns:
            Tuple[SolveStatus, str, float, str]: Status, raw status, total solve time
            and the backend that produced the status.
        """
        if not solvers:
            raise TubeMPCError("No conic solver with the required capability is installed")
        total = 0.0
        for i, solver in enumerate(solvers):
            if i:
                logger.warning(f"{solvers[i - 1]} returned {raw}, retrying with {solver}")
            status, raw, elapsed = self.run(problem, solver)
            total += elapsed
            if status is not SolveStatus.NUMERICAL_FAILURE:
                break
        return status, raw, total, solver


def map_status(status: Optional[str], solver: str) -> SolveStatus:
    """Maps cvxpy status strings; inaccurate infeasibility is not a certificate."""
    if status == cp.OPTIMAL:
        return SolveStatus.OPTIMAL
    if status == cp.OPTIMAL_INACCURATE:
        logger.warning(f"{solver} returned an inaccurate optimum, validation decides")
        return SolveStatus.OPTIMAL
    if status == cp.INFEASIBLE:
        return SolveStatus.INFEASIBLE
    if status == cp.UNBOUNDED:
        return SolveStatus.UNBOUNDED
    if status == cp.USER_LIMIT:
        return SolveStatus.TIME_LIMIT
    return SolveStatus.NUMERICAL_FAILURE


def solve_socp(
    program: ConicProgram,
    settings: Optional[SolverSettings] = None,
    backend: Optional[ConicBackend] = None,
) -> SolveResult:
    """Solves a standard-form second-order cone program.

    Cone blocks of equal dimension are stacked into one vectorized cvxpy constraint.

    Args:
        program (ConicProgram): Program to solve.
        settings (Optional[SolverSettings], optional): Backend settings.
            Defaults to None.
        backend (Optional[ConicBackend], optional): Pre-resolved backend, built from
            `settings` when omitted. Defaults to None.

    Returns:
        SolveResult: Status, objective and primal vector.
    """
    backend = backend or ConicBackend(settings)
    n = program.n_vars
    if n == 0:
        return SolveResult(SolveStatus.OPTIMAL, program.c0, np.zeros(0), solver="none", raw_status="empty")

    x = cp.Variable(n)
    constraints = []
    if program.n_linear_rows:
        constraints.append(cp.Constant(program.A_ub) @ x <= program.b_ub)
    if program.n_equality_rows:
        constraints.append(cp.Constant(program.A_eq) @ x == program.b_eq)
    groups: Dict[int, List[int]] = defaultdict(list)
    for i, block in enumerate(program.cones):
        groups[block.dim].append(i)
    for dim, members in groups.items():
        F = sp.vstack([program.cones[i].F for i in members], format="csr")
        g = np.concatenate([program.cones[i].g for i in members])
        stacked = cp.reshape(cp.Constant(F) @ x + g, (dim, len(members)), order="F")
        constraints.append(cp.SOC(stacked[0, :], stacked[1:, :], axis=0))

    problem = cp.Problem(cp.Minimize(program.c @ x + program.c0), constraints)
    status, raw, elapsed, solver = backend.run_chain(problem, backend.socp_solvers)
    if status is SolveStatus.OPTIMAL:
        return SolveResult(
            status,
            float(problem.value),
            np.asarray(x.value, dtype=float),
            elapsed,
            solver,
            raw,
        )
    return SolveResult(status, solve_time=elapsed, solver=solver, raw_status=raw)


def solve_sdp(
    objective: cp.Expression,
    lmi_blocks: Sequence[cp.Expression],
    constraints: Sequence[cp.Constraint] = (),
    settings: Optional[SolverSettings] = None,
    backend: Optional[ConicBackend] = None,
) -> SolveResult:
    """Minimizes `objective` subject to every block being positive semidefinite.

    Blocks are symmetrized before the PSD constraint is imposed. Variable values
    are read back by the caller from its own cvxpy variables.

    Args:
        objective (cp.Expression): Scalar objective to minimize.
        lmi_blocks (Sequence[cp.Expression]): Square matrix expressions.
        constraints (Sequence[cp.Constraint], optional): Extra constraints.
            Defaults to ().
        settings (Optional[SolverSettings], optional): Backend settings.
            Defaults to None.
        backend (Optional[ConicBackend], optional): Pre-resolved backend.
            Defaults to None.

    Returns:
        SolveResult: Status, objective and the stacked values of all variables.
    """
    backend = backend or ConicBackend(settings)
    psd = [0.5 * (M + M.T) >> 0 for M in lmi_blocks]
    problem = cp.Problem(cp.Minimize(objective), psd + list(constraints))
    status, raw, elapsed, solver = backend.run_chain(problem, backend.sdp_solvers)
    if status is SolveStatus.OPTIMAL:
        values = [np.ravel(v.value) for v in problem.variables() if v.value is not None]
        primal = np.concatenate(values) if values else None
        return SolveResult(status, float(problem.value), primal, elapsed, solver, raw)
    return SolveResult(status, solve_time=elapsed, solver=solver, raw_status=raw)


def solve_lp(
    c: FloatArray,
    A_ub: Optional[FloatArray] = None,
    b_ub: Optional[FloatArray] = None,
    A_eq: Optional[FloatArray] = None,
    b_eq: Optional[FloatArray] = None,
    bounds: Any = (None, None),
    maximize: bool = False,
) -> SolveResult:
    """Solves an LP with HiGHS.

    Args:
        c (FloatArray): Objective vector.
        A_ub (Optional[FloatArray], optional): Inequality rows. Defaults to None.
        b_ub (Optional[FloatArray], optional): Inequality offsets. Defaults to None.
        A_eq (Optional[FloatArray], optional): Equality rows. Defaults to None.
        b_eq (Optional[FloatArray], optional): Equality offsets. Defaults to None.
        bounds (Any, optional): Variable bounds in `scipy.optimize.linprog` form.
            Defaults to free variables.
        maximize (bool, optional): Maximizes instead; the reported objective is the
            maximum. Defaults to False.

    Returns:
        SolveResult: Status, objective and primal vector.
    """
    sign = -1.0 if maximize else 1.0
    start = time.perf_counter()
    res = linprog(
        sign * np.asarray(c, dtype=float),
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs",
    )
    elapsed = time.perf_counter() - start
    status = {
        0: SolveStatus.OPTIMAL,
        1: SolveStatus.TIME_LIMIT,
        2: SolveStatus.INFEASIBLE,
        3: SolveStatus.UNBOUNDED,
    }.get(res.status, SolveStatus.NUMERICAL_FAILURE)
    if status is SolveStatus.OPTIMAL:
        return SolveResult(status, sign * float(res.fun), np.asarray(res.x), elapsed, "HIGHS", res.message)
    return SolveResult(status, solve_time=elapsed, solver="HIGHS", raw_status=res.message)
