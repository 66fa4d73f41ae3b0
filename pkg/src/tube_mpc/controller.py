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

"""Robust adaptive tube MPC loop.

Every time step runs successive linearizations of the nominal trajectory. Each
iteration solves the online tube problem; an infeasible solve triggers a backtracking
line search between the current and the last feasible perturbation sequence.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum, auto
from typing import Any, Dict, List, Optional, Tuple
import logging
import time

import numpy as np

from src.config import (
    GAMMA_RULE,
    HORIZON_METHOD,
    INIT_ROUNDS,
    INIT_SLACK_TOL,
    ITER_MAX,
    LINE_SEARCH_MAXITER,
    TOLERANCE,
)
from src.tube_mpc.conic import ConicBackend, SolverSettings, SolveStatus, solve_socp
from src.tube_mpc.errors import (
    DivergentRollout,
    InitialInfeasible,
    TerminalDesignError,
    ValidationFailed,
)
from src.tube_mpc.estimator import ParamEstimate, nominal
from src.tube_mpc.geometry import FloatArray, VPolytope, as_vector, v_norm
from src.tube_mpc.linearize import (
    NominalTrajectory,
    StepLinearization,
    linearize_trajectory,
    rollout,
)
from src.tube_mpc.model import ProblemData, closed_loop_dynamics
from src.tube_mpc.ocp import (
    ConicProgram,
    CostDecrease,
    SizeStats,
    TubeSolution,
    assemble,
    count_constraints,
    extract,
)
from src.tube_mpc.terminal import (
    TerminalParams,
    find_terminal_horizon,
    refresh_for_parameter_set,
)

logger = logging.getLogger(__name__)


@dataclass
class ControllerConfig:
    """Settings of the MPC loop.

    Attributes:
        iter_max (int): Outer iterations per time step.
        tolerance (float): Convergence threshold on max_k ||v*_k||.
        line_search_maxiter (int): Step halvings before a line search gives up.
        use_fallback (bool): Re-solves at the stored feasible pair when the first
            iteration's line search gives up.
        online_terminal_refresh (bool): Redesigns V, K and sigma on every new
            parameter set instead of only updating d_Theta.
        gamma_rule (str): Terminal weight rule.
        horizon_method (str): Terminal horizon check method.
        certainty_equivalent (bool): Drops all uncertainty from the online problem.
        solver (SolverSettings): Conic backend settings.
    """

    iter_max: int = ITER_MAX
    tolerance: float = TOLERANCE
    line_search_maxiter: int = LINE_SEARCH_MAXITER
    use_fallback: bool = True
    online_terminal_refresh: bool = False
    gamma_rule: str = GAMMA_RULE
    horizon_method: str = HORIZON_METHOD
    certainty_equivalent: bool = False
    solver: SolverSettings = field(default_factory=SolverSettings)


@dataclass
class ControllerState:
    """Mutable state carried between time steps.

    Attributes:
        v0 (FloatArray): Current nominal perturbation sequence, shape (N, n_u).
        v0_old (FloatArray): Last sequence known to give a feasible problem.
        x0_old (FloatArray): Nominal trajectory of `v0_old`, shape (N + 1, n_x).
        Theta (VPolytope): Current parameter set.
        theta0 (FloatArray): Nominal parameter.
        params (TerminalParams): Terminal design in use.
        J_final_prev (Optional[float]): Final objective of the previous step.
        sigma_hat_prev (Optional[float]): sigma_hat of the previous step's final
            iteration.
        stage_cost_prev (Optional[float]): Realized stage cost of the previous step.
        t (int): Time step counter.
    """

    v0: FloatArray
    v0_old: FloatArray
    x0_old: FloatArray
    Theta: VPolytope
    theta0: FloatArray
    params: TerminalParams
    J_final_prev: Optional[float] = None
    sigma_hat_prev: Optional[float] = None
    stage_cost_prev: Optional[float] = None
    t: int = 0


class LineSearchOutcome(Enum):
    NOT_NEEDED = auto()
    RECOVERED = auto()
    FALLBACK = auto()
    ABANDONED = auto()


@dataclass
class StepReport:
    """Trace record of one time step.

    Attributes:
        t (int): Time step.
        u_applied (List[float]): Applied input.
        iterations (int): Outer iterations that produced a solution.
        line_search_trials (List[int]): Trials used by each iteration's line search.
        J_bar (List[float]): Objective of every successful iteration.
        feasible (List[bool]): Whether each iteration ended with a solution.
        iteration_times (List[float]): Wall time of every iteration in seconds.
        outcomes (List[str]): Line search outcome of every iteration.
        N_hat (int): Terminal horizon of the final solution.
        sigma_hat (float): sigma_hat of the final solution.
        size (Dict[str, float]): Size statistics of the last assembled problem.
    """

    t: int
    u_applied: List[float] = field(default_factory=list)
    iterations: int = 0
    line_search_trials: List[int] = field(default_factory=list)
    J_bar: List[float] = field(default_factory=list)
    feasible: List[bool] = field(default_factory=list)
    iteration_times: List[float] = field(default_factory=list)
    outcomes: List[str] = field(default_factory=list)
    N_hat: int = 0
    sigma_hat: float = 0.0
    size: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Attempt:
    traj: NominalTrajectory
    lins: List[StepLinearization]
    params: TerminalParams
    program: ConicProgram
    solution: TubeSolution
    stats: SizeStats


class TubeMPCController:
    """Successive-linearization tube MPC with set-membership adaptation.

    Args:
        pd (ProblemData): Control problem.
        params (TerminalParams): Offline terminal design.
        config (Optional[ControllerConfig], optional): Loop settings.
            Defaults to None.
        Theta (Optional[VPolytope], optional): Initial parameter set,
            the vertices of `pd.Theta0` by default.
    """

    def __init__(
        self,
        pd: ProblemData,
        params: TerminalParams,
        config: Optional[ControllerConfig] = None,
        Theta: Optional[VPolytope] = None,
    ):
        self.pd = pd
        self.config = config or ControllerConfig()
        self.backend = ConicBackend(self.config.solver)
        if Theta is None:
            Theta = pd.theta_vertices()
        self.initial_params = params.certainty() if self.config.certainty_equivalent else params
        self.initial_Theta = Theta
        self.state: Optional[ControllerState] = None

    def _zeros(self) -> FloatArray:
        return np.zeros((self.pd.N, self.pd.model.n_u))

    def _attempt(
        self,
        v0: FloatArray,
        x_init: FloatArray,
        x_plant: FloatArray,
        iteration: int,
        cost_decrease: CostDecrease,
        Theta: VPolytope,
        theta0: FloatArray,
        params: TerminalParams,
        relaxed: bool = False,
    ) -> Optional[Attempt]:
        """Rollout, horizon, linearization, assembly, solve and extraction; None when
        any stage reports infeasibility."""
        pd, cfg = self.pd, self.config
        start = time.perf_counter()
        try:
            traj = rollout(pd, x_init, v0, theta0, params.K)
        except DivergentRollout as exc:
            logger.debug(f"Rollout diverged at step {exc.step}")
            return None
        x0N_norm = v_norm(traj.x0[-1], params.V)
        try:
            N_hat, sigma_hat = find_terminal_horizon(
                params, x0N_norm, cfg.horizon_method, cfg.solver
            )
        except TerminalDesignError as exc:
            logger.debug(f"No terminal horizon at ||x0_N||_V = {x0N_norm:.4g}: {exc}")
            return None
        params = params.with_horizon(N_hat, sigma_hat)
        lins = linearize_trajectory(
            pd, traj, Theta, params.V, params.sigma, certainty=cfg.certainty_equivalent
        )
        program = assemble(
            pd,
            traj,
            lins,
            params,
            x_plant,
            cost_decrease,
            iteration,
            relaxed=relaxed,
            certainty=cfg.certainty_equivalent,
        )
        assembly_time = time.perf_counter() - start
        result = solve_socp(program, backend=self.backend)
        stats = count_constraints(program, assembly_time, result.solve_time)
        if result.status is SolveStatus.NUMERICAL_FAILURE:
            logger.warning(f"Numerical failure ({result.raw_status}) treated as infeasible")
            return None
        if not result.optimal:
            logger.debug(f"Online problem {result.status.name}")
            return None
        try:
            solution = extract(program, result)
        except ValidationFailed as exc:
            logger.warning(f"Solution rejected: {exc}")
            return None
        return Attempt(traj, lins, params, program, solution, stats)

    def reset(self, x_init: FloatArray, v0: Optional[FloatArray] = None) -> ControllerState:
        """Starts a run from `x_init` with a sequence that is feasible there."""
        v0 = self._zeros() if v0 is None else np.asarray(v0, dtype=float).reshape(self.pd.N, -1)
        Theta = self.initial_Theta
        theta0 = Theta.mean()
        params = self.initial_params
        traj = rollout(self.pd, x_init, v0, theta0, params.K)
        self.state = ControllerState(
            v0=v0.copy(), v0_old=v0.copy(), x0_old=traj.x0.copy(),
            Theta=Theta, theta0=theta0, params=params,
        )
        return self.state

    def init_feasible(self, x_init: FloatArray) -> FloatArray:
        """Finds a perturbation sequence for which the problem at t = 0 is feasible.

        Tries v0 = 0 first, then rounds of the slack-relaxed problem, each followed by
        a clean re-solve once the slack vanishes.

        Raises:
            InitialInfeasible: No round drives the slack below INIT_SLACK_TOL.

        Returns:
            FloatArray: Feasible v0, shape (N, n_u).
        """
        x_init = as_vector(x_init)
        Theta = self.initial_Theta
        theta0 = Theta.mean()
        params = self.initial_params
        v0 = self._zeros()
        if self._attempt(v0, x_init, x_init, 1, CostDecrease(), Theta, theta0, params):
            return v0
        best_slack = float("inf")
        for repair_round in range(INIT_ROUNDS):
            relaxed = self._attempt(
                v0, x_init, x_init, 1, CostDecrease(), Theta, theta0, params, relaxed=True
            )
            if relaxed is None:
                break
            slack = relaxed.solution.slack
            best_slack = min(best_slack, slack)
            logger.debug(f"Initial repair round {repair_round}: slack {slack:.3e}")
            if slack <= INIT_SLACK_TOL and self._attempt(
                v0, x_init, x_init, 1, CostDecrease(), Theta, theta0, params
            ):
                return v0
            v0 = v0 + relaxed.solution.v_star
        raise InitialInfeasible(best_slack)

    def update_parameters(self, estimate: ParamEstimate) -> None:
        """Installs a new parameter set, its nominal parameter and terminal scalars."""
        st = self._require_state()
        st.Theta = estimate.vertices
        st.theta0 = nominal(estimate)
        st.params = refresh_for_parameter_set(
            st.params,
            self.pd,
            st.Theta,
            resolve_lmi=self.config.online_terminal_refresh,
            gamma_rule=self.config.gamma_rule,
            settings=self.config.solver,
        )

    def _require_state(self) -> ControllerState:
        if self.state is None:
            raise RuntimeError("Controller not initialized, call reset() first")
        return self.state

    def _cost_decrease(self, iteration: int, J_prev_iter: Optional[float]) -> CostDecrease:
        st = self._require_state()
        if iteration > 1:
            return CostDecrease(prev_iter_J=J_prev_iter)
        if st.J_final_prev is None:
            return CostDecrease()
        return CostDecrease(
            prev_J_final=st.J_final_prev,
            prev_stage_cost=st.stage_cost_prev,
            prev_sigma_hat=st.sigma_hat_prev,
        )

    def line_search(
        self,
        v0: FloatArray,
        v0_old: FloatArray,
        x00: FloatArray,
        x00_old: FloatArray,
        x_plant: FloatArray,
        iteration: int,
        cost_decrease: CostDecrease,
    ) -> Tuple[LineSearchOutcome, Optional[Attempt], FloatArray, FloatArray, int]:
        """Backtracks from (v0, x00) towards the last feasible pair.

        The step is halved before each blend and the blend updates the sequence in
        place; the initial nominal state is blended only at the first iteration.

        Returns:
            Tuple[LineSearchOutcome, Optional[Attempt], FloatArray, FloatArray, int]:
                Outcome, successful attempt, final (v0, x00) and trials used.
        """
        st = self._require_state()
        alpha = 1.0
        for trial in range(1, self.config.line_search_maxiter + 1):
            alpha /= 2.0
            v0 = v0_old + alpha * (v0 - v0_old)
            if iteration == 1:
                x00 = x00_old + alpha * (x00 - x00_old)
            attempt = self._attempt(
                v0, x00, x_plant, iteration, cost_decrease, st.Theta, st.theta0, st.params
            )
            logger.debug(f"Line search trial {trial} (alpha = {alpha:.4g}): {attempt is not None}")
            if attempt is not None:
                return LineSearchOutcome.RECOVERED, attempt, v0, x00, trial

        trials = self.config.line_search_maxiter
        v0 = v0_old.copy()
        if iteration == 1:
            x00 = x00_old.copy()
            if self.config.use_fallback:
                attempt = self._attempt(
                    v0, x00, x_plant, iteration, cost_decrease, st.Theta, st.theta0, st.params
                )
                if attempt is not None:
                    return LineSearchOutcome.FALLBACK, attempt, v0, x00, trials
        return LineSearchOutcome.ABANDONED, None, v0, x00, trials

    def step(self, x_plant: FloatArray) -> Tuple[FloatArray, StepReport]:
        """One time step of the MPC loop.

        Args:
            x_plant (FloatArray): Measured state.

        Returns:
            Tuple[FloatArray, StepReport]: Applied input and the step's trace record.
        """
        st = self._require_state()
        pd, cfg = self.pd, self.config
        x_plant = as_vector(x_plant)
        report = StepReport(t=st.t)

        v0, v0_old = st.v0.copy(), st.v0_old.copy()
        x00, x00_old = x_plant.copy(), st.x0_old[0].copy()
        last: Optional[Attempt] = None
        J_prev_iter: Optional[float] = None
        v_star_norm = float("inf")
        i = 1
        while i <= cfg.iter_max and v_star_norm >= cfg.tolerance:
            start = time.perf_counter()
            cd = self._cost_decrease(i, J_prev_iter)
            attempt = self._attempt(v0, x00, x_plant, i, cd, st.Theta, st.theta0, st.params)
            outcome, trials = LineSearchOutcome.NOT_NEEDED, 0
            if attempt is None:
                outcome, attempt, v0, x00, trials = self.line_search(
                    v0, v0_old, x00, x00_old, x_plant, i, cd
                )
            report.line_search_trials.append(trials)
            report.outcomes.append(outcome.name)
            report.iteration_times.append(time.perf_counter() - start)
            report.feasible.append(attempt is not None)

            if attempt is None:
                # v* = 0 and the loop terminates
                break
            last = attempt
            sol = attempt.solution
            J_prev_iter = sol.J_bar
            report.J_bar.append(sol.J_bar)
            report.iterations += 1
            v_star_norm = sol.v_norm_max
            v0_old = v0.copy()
            v0 = v0 + sol.v_star
            logger.debug(f"t = {st.t}, i = {i}: J = {sol.J_bar:.6g}, ||v*|| = {v_star_norm:.3e}")
            i += 1

        K = st.params.K
        u = K @ x_plant + v0[0]
        report.u_applied = u.tolist()
        stage = float(x_plant @ pd.Q @ x_plant + u @ pd.R @ u)

        zero = np.zeros((1, pd.model.n_u))
        if last is not None:
            x0_tail = last.traj.x0
            report.N_hat = last.params.N_hat
            report.sigma_hat = last.params.sigma_hat
            report.size = asdict(last.stats)
            st.J_final_prev = report.J_bar[-1]
            st.sigma_hat_prev = last.params.sigma_hat
            st.stage_cost_prev = stage
        else:
            logger.warning(f"t = {st.t}: no feasible iteration, applying the stored sequence")
            x0_tail = st.x0_old
            st.J_final_prev = None
        appended = closed_loop_dynamics(pd.model, x0_tail[-1], np.zeros(pd.model.n_u), st.theta0, K)
        st.x0_old = np.vstack([x0_tail[1:], appended])
        st.v0 = np.vstack([v0[1:], zero])
        st.v0_old = np.vstack([v0_old[1:], zero])
        st.t += 1
        logger.info(
            f"t = {report.t}: {report.iterations} iterations, "
            f"J = {report.J_bar[-1] if report.J_bar else float('nan'):.6g}"
        )
        return u, report
