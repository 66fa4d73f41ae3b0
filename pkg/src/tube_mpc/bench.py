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

"""Random benchmark instances, closed-loop simulation and dimension sweeps.

Instances use quadratic basis functions f_i = e_i [x]_{j_i}^2 on top of a random
linear model. The plant evolves with the hidden true parameter and a seeded
disturbance stream while the controller only sees the estimated parameter set.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np
import pandas as pd

from src.config import (
    HORIZON,
    INIT_STATE_BOUND,
    INIT_TRIES,
    INSTANCES,
    MAX_REDRAWS,
    N_W,
    S_OFFSET,
    SIM_STEPS,
    SPECTRAL_RADIUS,
    THETA_RADIUS,
    THETA_SCALE,
    U_BOUND,
    W_BOUND,
    XHAT_BOUND,
)
from src.tube_mpc.artifacts import polytope_from_dict, polytope_to_dict
from src.tube_mpc.controller import ControllerConfig, TubeMPCController
from src.tube_mpc.errors import (
    DimensionError,
    EstimatorInconsistent,
    InitialInfeasible,
    TerminalDesignError,
)
from src.tube_mpc.estimator import ParamEstimate, initial_estimate, update
from src.tube_mpc.geometry import FloatArray, HPolytope, VPolytope, contains_point
from src.tube_mpc.model import ProblemData, QuadraticBasisModel, eval_dynamics
from src.tube_mpc.run_log import RunLog
from src.tube_mpc.terminal import TerminalParams, design_terminal, sigma_bar

logger = logging.getLogger(__name__)

SUBOPTIMALITY_BASELINE = (
    "certainty-equivalent problem at t = 0: W = {0}, Theta = {theta*}, beta_0 = 0, "
    "no linearization error set, iterated to convergence from its repaired start and from the "
    "robust start, smallest cost"
)


@dataclass(frozen=True)
class BenchmarkSpec:
    """Size and seed of a family of random instances.

    Attributes:
        n_x (int): State dimension.
        n_u (int): Input dimension.
        n_theta (int): Number of uncertain parameters.
        n_w (int): Disturbance dimension, capped at n_x.
        N (int): Prediction horizon.
        T (int): Closed-loop steps per simulation.
        seed (int): Base seed; instance k uses seed + k.
        instances (int): Instances per size.
    """

    n_x: int
    n_u: int
    n_theta: int
    n_w: int = N_W
    N: int = HORIZON
    T: int = SIM_STEPS
    seed: int = 0
    instances: int = INSTANCES

    def __post_init__(self):
        if min(self.n_x, self.n_u, self.n_theta, self.n_w, self.N, self.T, self.instances) < 1:
            raise DimensionError("Benchmark dimensions and counts must be at least 1")
        if self.n_w > self.n_x:
            raise DimensionError(f"n_w = {self.n_w} exceeds n_x = {self.n_x}")
        if self.n_theta > self.n_x:
            raise DimensionError(f"n_theta = {self.n_theta} exceeds n_x = {self.n_x}")

    @property
    def size(self) -> Tuple[int, int, int]:
        return (self.n_x, self.n_u, self.n_theta)

    @classmethod
    def for_size(cls, size: Sequence[int], **kwargs: Any) -> "BenchmarkSpec":
        n_x, n_u, n_theta = (int(s) for s in size)
        kwargs.setdefault("n_w", min(N_W, n_x))
        return cls(n_x, n_u, n_theta, **kwargs)


@dataclass
class Truth:
    """Hidden plant data: the true parameter and the disturbance generator.

    Attributes:
        theta_star (FloatArray): True parameter.
        B_w (FloatArray): Disturbance input matrix, full column rank.
        seed (int): Seed of the disturbance stream.
    """

    theta_star: FloatArray
    B_w: FloatArray
    seed: int

    def disturbances(self, T: int) -> FloatArray:
        """First T disturbances of the stream, shape (T, n_x).

        Longer requests extend shorter ones.
        """
        rng = np.random.default_rng([self.seed, 1])
        w_hat = rng.uniform(-W_BOUND, W_BOUND, size=(T, self.B_w.shape[1]))
        return w_hat @ self.B_w.T

    def to_dict(self) -> Dict[str, Any]:
        return {"theta_star": self.theta_star.tolist(), "B_w": self.B_w.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Truth":
        return cls(
            np.asarray(data["theta_star"], dtype=float),
            np.asarray(data["B_w"], dtype=float),
            int(data["seed"]),
        )


@dataclass
class Instance:
    pd: ProblemData
    truth: Truth
    params: TerminalParams
    seed: int
    redraws: int = 0


@dataclass
class ClosedLoopTrace:
    """Record of one closed-loop run.

    Attributes:
        states (FloatArray): Plant states, shape (T + 1, n_x).
        inputs (FloatArray): Applied inputs, shape (T, n_u).
        stage_costs (FloatArray): Realized stage costs, shape (T,).
        theta_offsets (FloatArray): Offsets of Theta_t, shape (T + 1, n_h).
        theta_H (FloatArray): Fixed facet normals of Theta_t.
        reports (List[Dict[str, Any]]): StepReport records.
        disturbances (FloatArray): Realized disturbances, shape (T, n_x).
        theta_star (FloatArray): True parameter.
        X (HPolytope): State constraints.
        U (HPolytope): Input constraints.
        sigma_bar (float): Average-cost bound of the terminal design.
        estimator_frozen (bool): Whether an inconsistent update froze Theta_t.
    """

    states: FloatArray
    inputs: FloatArray
    stage_costs: FloatArray
    theta_offsets: FloatArray
    theta_H: FloatArray
    reports: List[Dict[str, Any]]
    disturbances: FloatArray
    theta_star: FloatArray
    X: HPolytope
    U: HPolytope
    sigma_bar: float
    estimator_frozen: bool = False
    meta: Dict[str, Any] = field(default_factory=dict)

    _arrays = (
        "states", "inputs", "stage_costs", "theta_offsets", "theta_H", "disturbances", "theta_star"
    )

    def to_dict(self) -> Dict[str, Any]:
        out = {name: np.asarray(getattr(self, name)).tolist() for name in self._arrays}
        out["X"] = polytope_to_dict(self.X)
        out["U"] = polytope_to_dict(self.U)
        out["reports"] = self.reports
        out["sigma_bar"] = self.sigma_bar
        out["estimator_frozen"] = self.estimator_frozen
        out["meta"] = self.meta
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ClosedLoopTrace":
        arrays = {name: np.asarray(data[name], dtype=float) for name in cls._arrays}
        return cls(
            **arrays,
            reports=list(data["reports"]),
            X=polytope_from_dict(data["X"]),
            U=polytope_from_dict(data["U"]),
            sigma_bar=float(data["sigma_bar"]),
            estimator_frozen=bool(data.get("estimator_frozen", False)),
            meta=dict(data.get("meta", {})),
        )


def _disturbance_matrix(rng: np.random.Generator, n_x: int, n_w: int) -> FloatArray:
    while True:
        B_w = rng.standard_normal((n_x, n_w))
        if np.linalg.matrix_rank(B_w) == n_w:
            return B_w


def _draw(spec: BenchmarkSpec, rng: np.random.Generator) -> Tuple[ProblemData, Truth]:
    n_x, n_u, n_theta, n_w = spec.n_x, spec.n_u, spec.n_theta, spec.n_w
    A = rng.standard_normal((n_x, n_x))
    radius = np.abs(np.linalg.eigvals(A)).max()
    if radius > SPECTRAL_RADIUS:
        A *= SPECTRAL_RADIUS / radius
    B = rng.standard_normal((n_x, n_u))
    j_indices = rng.integers(0, n_x, size=n_theta)
    B_w = _disturbance_matrix(rng, n_x, n_w)
    corners = np.array(list(product([-W_BOUND, W_BOUND], repeat=n_w)))
    W = VPolytope(corners @ B_w.T)

    theta_star = rng.uniform(-THETA_SCALE, THETA_SCALE, size=n_theta)
    # theta* is the convex combination lam of the vertices of a simplex of edge s;
    # every vertex then lies within s * sqrt(2) of theta*
    s = THETA_RADIUS / np.sqrt(2.0)
    lam = rng.dirichlet(np.ones(n_theta + 1))
    a = s * lam[1:] - theta_star
    b = s - a.sum()
    Theta0 = HPolytope.simplex(a, b, n_theta)

    model = QuadraticBasisModel(A, B, j_indices, XHAT_BOUND)
    pd = ProblemData(
        model=model,
        X=HPolytope.full_space(n_x),
        U=HPolytope.box(U_BOUND, n_u),
        Theta0=Theta0,
        W=W,
        S=HPolytope.simplex(S_OFFSET, S_OFFSET, n_x),
        Vset=HPolytope.full_space(n_u),
        Q=np.eye(n_x),
        R=np.eye(n_u),
        N=spec.N,
        Xhat=HPolytope.box(XHAT_BOUND, n_x),
        Uhat=HPolytope.full_space(n_u),
    )
    truth = Truth(theta_star, B_w, int(rng.integers(2 ** 31)))
    return pd, truth


def generate_instance(
    spec: BenchmarkSpec,
    seed: Optional[int] = None,
    config: Optional[ControllerConfig] = None,
) -> Instance:
    """Draws a random instance and its offline terminal design.

    Draws whose terminal LMI is infeasible are rejected and redrawn from the same
    generator.

    Args:
        spec (BenchmarkSpec): Instance size.
        seed (Optional[int], optional): Seed, `spec.seed` by default.
        config (Optional[ControllerConfig], optional): Supplies the gamma rule,
            horizon method and solver settings. Defaults to None.

    Raises:
        TerminalDesignError: No stabilizable draw within MAX_REDRAWS.

    Returns:
        Instance: Problem, hidden truth and terminal design.
    """
    seed = spec.seed if seed is None else seed
    config = config or ControllerConfig()
    rng = np.random.default_rng(seed)
    last_error: Optional[TerminalDesignError] = None
    for redraw in range(MAX_REDRAWS):
        pd, truth = _draw(spec, rng)
        try:
            params = design_terminal(
                pd, gamma_rule=config.gamma_rule, method=config.horizon_method, settings=config.solver
            )
        except TerminalDesignError as exc:
            logger.info(f"Seed {seed}: draw {redraw} rejected ({exc})")
            last_error = exc
            continue
        return Instance(pd, truth, params, seed, redraw)
    raise TerminalDesignError(f"No feasible terminal design in {MAX_REDRAWS} draws: {last_error}")


def draw_initial_state(
    controller: TubeMPCController, rng: np.random.Generator, tries: int = INIT_TRIES
) -> Tuple[FloatArray, FloatArray]:
    """Rejection-samples x_0 in the unit box until init_feasible succeeds.

    Raises:
        InitialInfeasible: Every draw failed.

    Returns:
        Tuple[FloatArray, FloatArray]: Initial state and its feasible v0.
    """
    n_x = controller.pd.model.n_x
    best_slack = float("inf")
    for attempt in range(tries):
        x = rng.uniform(-INIT_STATE_BOUND, INIT_STATE_BOUND, size=n_x)
        try:
            return x, controller.init_feasible(x)
        except InitialInfeasible as exc:
            best_slack = min(best_slack, exc.max_slack)
            logger.debug(f"Initial state {attempt} rejected (slack {exc.max_slack:.3e})")
    logger.info(f"No feasible initial state in {tries} draws")
    raise InitialInfeasible(best_slack)


def simulate(
    instance: Instance,
    config: Optional[ControllerConfig] = None,
    T: Optional[int] = None,
    x_init: Optional[FloatArray] = None,
    v0: Optional[FloatArray] = None,
    log: Optional[RunLog] = None,
    disturbances: Optional[FloatArray] = None,
) -> ClosedLoopTrace:
    """Runs the controller and the estimator against the true plant.

    Args:
        instance (Instance): Benchmark instance.
        config (Optional[ControllerConfig], optional): Loop settings. Defaults to None.
        T (Optional[int], optional): Steps, SIM_STEPS by default.
        x_init (Optional[FloatArray], optional): Initial state; drawn by rejection
            when omitted.
        v0 (Optional[FloatArray], optional): Feasible sequence at `x_init`; found by
            init_feasible when omitted.
        log (Optional[RunLog], optional): Appends one record per step. Defaults to None.
        disturbances (Optional[FloatArray], optional): Overrides the truth's stream,
            shape (T, n_x).

    Raises:
        InitialInfeasible: No feasible initial condition.

    Returns:
        ClosedLoopTrace: The run.
    """
    pd = instance.pd
    T = SIM_STEPS if T is None else T
    controller = TubeMPCController(pd, instance.params, config)
    if x_init is None:
        rng = np.random.default_rng([instance.seed, 2])
        x_init, v0 = draw_initial_state(controller, rng)
    elif v0 is None:
        v0 = controller.init_feasible(x_init)
    controller.reset(x_init, v0)

    w = instance.truth.disturbances(T) if disturbances is None else np.asarray(disturbances)
    estimate: ParamEstimate = initial_estimate(pd.Theta0)
    frozen = False
    states = [np.asarray(x_init, dtype=float)]
    inputs, stage_costs, offsets, reports = [], [], [estimate.h.copy()], []
    x = states[0]
    for t in range(T):
        u, report = controller.step(x)
        x_next = eval_dynamics(pd.model, x, u, instance.truth.theta_star) + w[t]
        stage_costs.append(float(x @ pd.Q @ x + u @ pd.R @ u))
        if not frozen:
            try:
                estimate = update(estimate, pd.model, pd.W, x, u, x_next)
                controller.update_parameters(estimate)
            except EstimatorInconsistent as exc:
                logger.warning(f"t = {t}: parameter set frozen ({exc})")
                frozen = True
        record = report.to_dict()
        reports.append(record)
        if log is not None:
            log.append({**record, "theta_offsets": estimate.h.tolist()})
        inputs.append(u)
        offsets.append(estimate.h.copy())
        states.append(x_next)
        x = x_next

    return ClosedLoopTrace(
        states=np.vstack(states),
        inputs=np.vstack(inputs),
        stage_costs=np.asarray(stage_costs),
        theta_offsets=np.vstack(offsets),
        theta_H=pd.Theta0.H.copy(),
        reports=reports,
        disturbances=np.asarray(w[:T]),
        theta_star=instance.truth.theta_star.copy(),
        X=pd.X,
        U=pd.U,
        sigma_bar=sigma_bar(instance.params),
        estimator_frozen=frozen,
        meta={"seed": instance.seed, "redraws": instance.redraws, "v0": np.asarray(v0).tolist()},
    )


def certainty_equivalent_problem(instance: Instance) -> ProblemData:
    """The instance with W = {0} and Theta0 the single point theta*."""
    pd = instance.pd
    theta_star = instance.truth.theta_star
    return replace(
        pd,
        W=VPolytope(np.zeros((1, pd.model.n_x))),
        Theta0=HPolytope.simplex(-theta_star, float(theta_star.sum()), pd.model.n_theta),
    )


def certainty_equivalent_cost(
    instance: Instance,
    x_init: FloatArray,
    config: Optional[ControllerConfig] = None,
    v0: Optional[FloatArray] = None,
) -> Optional[float]:
    """Optimal cost of the certainty-equivalent problem at `x_init`.

    The certainty-equivalent loop is started from its own init_feasible sequence
    and, when given, from the robust start `v0`. The smallest converged cost is
    returned.

    Args:
        instance (Instance): Benchmark instance.
        x_init (FloatArray): Initial state.
        config (Optional[ControllerConfig], optional): Loop settings. Defaults to None.
        v0 (Optional[FloatArray], optional): Robust initial sequence at `x_init`.
            Defaults to None.

    Returns:
        Optional[float]: Converged objective, None when no start is feasible.
    """
    config = replace(config or ControllerConfig(), certainty_equivalent=True)
    controller = TubeMPCController(certainty_equivalent_problem(instance), instance.params, config)
    starts = []
    try:
        starts.append(controller.init_feasible(x_init))
    except InitialInfeasible as exc:
        logger.info(f"Certainty-equivalent start not repaired (slack {exc.max_slack:.3e})")
    if v0 is not None:
        starts.append(np.asarray(v0, dtype=float))
    costs = []
    for start in starts:
        controller.reset(x_init, start)
        _, report = controller.step(x_init)
        if report.J_bar:
            costs.append(report.J_bar[-1])
    return min(costs) if costs else None


def suboptimality(J_first: float, J_ce: Optional[float]) -> float:
    if J_ce is None or J_ce <= 0:
        return float("nan")
    return J_first / J_ce - 1.0


def verify_trace(trace: ClosedLoopTrace, tol: float = 1e-6) -> List[str]:
    """Re-checks the invariants of a closed-loop run.

    Checks state and input constraints, nestedness of Theta_t, consistency with
    theta*, and the step-to-step cost decrease J_{t+1} - J_t <= -l_t + sigma_hat_t^2.

    Returns:
        List[str]: One message per violation, empty when the trace is sound.
    """
    problems = []
    X, U = trace.X, trace.U
    for t, x in enumerate(trace.states[:-1]):
        if not contains_point(X, x, tol):
            problems.append(f"t = {t}: state outside X")
    for t, u in enumerate(trace.inputs):
        if not contains_point(U, u, tol):
            problems.append(f"t = {t}: input outside U")
    for t in range(1, len(trace.theta_offsets)):
        if np.any(trace.theta_offsets[t] > trace.theta_offsets[t - 1] + tol):
            problems.append(f"t = {t}: parameter set grew")
        if not contains_point(HPolytope(trace.theta_H, trace.theta_offsets[t]), trace.theta_star, tol):
            problems.append(f"t = {t}: parameter set excludes theta*")
    for t in range(len(trace.reports) - 1):
        now, nxt = trace.reports[t], trace.reports[t + 1]
        if not now["J_bar"] or not nxt["J_bar"]:
            continue
        J_t, J_next = now["J_bar"][-1], nxt["J_bar"][-1]
        bound = J_t - trace.stage_costs[t] + now["sigma_hat"] ** 2
        if J_next > bound + tol * (1.0 + abs(bound)):
            problems.append(f"t = {t + 1}: cost increased by {J_next - bound:.3e} beyond the bound")
    return problems


def run_instance(
    spec: BenchmarkSpec, seed: int, config: Optional[ControllerConfig] = None
) -> Dict[str, Any]:
    """One sweep row: design, simulation and the certainty-equivalent baseline."""
    config = config or ControllerConfig()
    row: Dict[str, Any] = {
        "n_x": spec.n_x, "n_u": spec.n_u, "n_theta": spec.n_theta, "N": spec.N, "seed": seed,
    }
    start = time.perf_counter()
    try:
        instance = generate_instance(spec, seed, config)
        trace = simulate(instance, config, spec.T)
    except (TerminalDesignError, InitialInfeasible) as exc:
        logger.info(f"Instance {spec.size} seed {seed} rejected: {exc}")
        row["rejected"] = True
        return row

    first = trace.reports[0]
    times = [s for r in trace.reports for s in r["iteration_times"]]
    J_ce = certainty_equivalent_cost(instance, trace.states[0], config, trace.meta.get("v0"))
    row.update(
        rejected=False,
        redraws=instance.redraws,
        iteration_time_mean=float(np.mean(times)),
        iteration_time_min=float(np.min(times)),
        iteration_time_max=float(np.max(times)),
        convergence_time=float(sum(first["iteration_times"])),
        iterations_mean=float(np.mean([r["iterations"] for r in trace.reports])),
        n_vars=first["size"].get("n_vars"),
        n_linear_rows=first["size"].get("n_linear_rows"),
        n_equality_rows=first["size"].get("n_equality_rows"),
        n_soc_blocks=first["size"].get("n_soc_blocks"),
        suboptimality=suboptimality(first["J_bar"][0], J_ce) if first["J_bar"] else float("nan"),
        realized_cost_mean=float(trace.stage_costs.mean()),
        sigma_bar=trace.sigma_bar,
        violations=len(verify_trace(trace)),
        wall_time=time.perf_counter() - start,
    )
    return row


def _run_row(args: Tuple[BenchmarkSpec, int, ControllerConfig]) -> Dict[str, Any]:
    return run_instance(*args)


def sweep(
    specs: Sequence[BenchmarkSpec],
    config: Optional[ControllerConfig] = None,
    workers: int = 1,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Runs every instance of every size and aggregates per size.

    Args:
        specs (Sequence[BenchmarkSpec]): Sizes; each contributes `instances` rows
            with seeds seed, seed + 1, ...
        config (Optional[ControllerConfig], optional): Loop settings. Defaults to None.
        workers (int, optional): Worker processes; 1 runs inline. Defaults to 1.

    Returns:
        Tuple[pd.DataFrame, pd.DataFrame]: Per-instance rows sorted by (size, seed)
            and the per-size summary.
    """
    config = config or ControllerConfig()
    jobs = [(spec, spec.seed + k, config) for spec in specs for k in range(spec.instances)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, jobs))
    else:
        rows = [_run_row(job) for job in jobs]

    raw = pd.DataFrame(rows).sort_values(["n_x", "n_u", "n_theta", "seed"]).reset_index(drop=True)
    return raw, summarize(raw)


def summarize(raw: pd.DataFrame) -> pd.DataFrame:
    """Per-size means, extremes and counts of the accepted instances.

    Instances without a suboptimality value are left out of its mean and counted in
    `suboptimality_missing`.
    """
    accepted = raw[~raw["rejected"].astype(bool)]
    keys = ["n_x", "n_u", "n_theta", "N"]
    if accepted.empty:
        return pd.DataFrame(columns=keys)
    summary = accepted.groupby(keys).agg(
        instances=("seed", "count"),
        iteration_time_mean=("iteration_time_mean", "mean"),
        iteration_time_min=("iteration_time_min", "min"),
        iteration_time_max=("iteration_time_max", "max"),
        convergence_time=("convergence_time", "mean"),
        iterations_mean=("iterations_mean", "mean"),
        n_vars=("n_vars", "mean"),
        n_linear_rows=("n_linear_rows", "mean"),
        n_equality_rows=("n_equality_rows", "mean"),
        n_soc_blocks=("n_soc_blocks", "mean"),
        suboptimality=("suboptimality", "mean"),
        suboptimality_missing=("suboptimality", lambda s: int(s.isna().sum())),
        realized_cost_mean=("realized_cost_mean", "mean"),
        violations=("violations", "sum"),
    )
    summary["rejected"] = raw.groupby(keys)["rejected"].sum().reindex(summary.index).fillna(0)
    missing = int(summary["suboptimality_missing"].sum())
    if missing:
        logger.warning(f"{missing} accepted instances have no certainty-equivalent baseline")
    return summary.reset_index()


def soc_scaling_slope(n_theta: Sequence[int], soc_counts: Sequence[float]) -> float:
    """Slope of log(SOC count) against log(n_theta + 1) by least squares."""
    x = np.log(np.asarray(n_theta, dtype=float) + 1.0)
    y = np.log(np.asarray(soc_counts, dtype=float))
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def sweep_metadata(specs: Sequence[BenchmarkSpec], config: ControllerConfig) -> Dict[str, Any]:
    return {
        "sizes": [asdict(spec) for spec in specs],
        "suboptimality_baseline": SUBOPTIMALITY_BASELINE,
        "gamma_rule": config.gamma_rule,
        "horizon_method": config.horizon_method,
        "iter_max": config.iter_max,
        "tolerance": config.tolerance,
    }
