import json

import numpy as np
import pandas as pd
import pytest

from src.tube_mpc.bench import (
    BenchmarkSpec,
    ClosedLoopTrace,
    certainty_equivalent_cost,
    certainty_equivalent_problem,
    generate_instance,
    run_instance,
    simulate,
    soc_scaling_slope,
    suboptimality,
    summarize,
    sweep,
    sweep_metadata,
    verify_trace,
)
from src.tube_mpc.controller import ControllerConfig
from src.tube_mpc.errors import DimensionError, InitialInfeasible, TerminalDesignError
from src.tube_mpc.geometry import HPolytope, contains_point, vertices
from src.tube_mpc.run_log import RunLog


def test_benchmark_spec():
    spec = BenchmarkSpec.for_size((1, 1, 1))
    assert spec.n_w == 1
    assert spec.size == (1, 1, 1)
    with pytest.raises(DimensionError):
        BenchmarkSpec(2, 1, 3)
    with pytest.raises(DimensionError):
        BenchmarkSpec(2, 1, 1, n_w=3)
    with pytest.raises(DimensionError):
        BenchmarkSpec(2, 0, 1)


def test_generate_instance_is_deterministic(small_spec, small_instance):
    again = generate_instance(small_spec)
    np.testing.assert_array_equal(again.pd.model.A, small_instance.pd.model.A)
    np.testing.assert_array_equal(again.truth.theta_star, small_instance.truth.theta_star)
    np.testing.assert_allclose(again.params.V, small_instance.params.V)


def test_instance_sets(small_spec, small_instance):
    pd, truth = small_instance.pd, small_instance.truth
    assert len(pd.W) == 2 ** small_spec.n_w
    assert pd.N == small_spec.N
    assert contains_point(pd.Theta0, truth.theta_star)
    Theta = vertices(pd.Theta0).vertices
    assert np.linalg.norm(Theta - truth.theta_star, axis=1).max() <= 0.05 + 1e-12
    assert np.abs(np.linalg.eigvals(pd.model.A)).max() <= 1.2 + 1e-9
    assert small_instance.params.N_hat >= 1


def test_disturbance_stream(small_instance):
    truth = small_instance.truth
    long, short = truth.disturbances(6), truth.disturbances(3)
    assert long.shape == (6, 2)
    np.testing.assert_array_equal(long[:3], short)
    w_hat = np.linalg.lstsq(truth.B_w, long.T, rcond=None)[0]
    assert np.abs(w_hat).max() <= 0.01 + 1e-12


def test_certainty_equivalent_problem(small_instance):
    ce = certainty_equivalent_problem(small_instance)
    np.testing.assert_allclose(ce.W.vertices, 0.0)
    Theta = vertices(ce.Theta0).vertices
    np.testing.assert_allclose(Theta, np.tile(small_instance.truth.theta_star, (len(Theta), 1)), atol=1e-12)


def test_certainty_equivalent_cost(small_instance):
    trace = simulate(small_instance, T=1)
    v0 = np.asarray(trace.meta["v0"])
    assert v0.shape == (small_instance.pd.N, small_instance.pd.model.n_u)
    J_ce = certainty_equivalent_cost(small_instance, trace.states[0], v0=v0)
    assert J_ce is not None and np.isfinite(J_ce)
    # the robust start only adds a candidate
    J_own = certainty_equivalent_cost(small_instance, trace.states[0])
    if J_own is not None:
        assert J_ce <= J_own + 1e-9


def test_simulate(tmp_path, small_instance):
    log = RunLog(tmp_path / "run.jsonl", run_id="small")
    trace = simulate(small_instance, T=3, log=log)
    n_x, n_u = small_instance.pd.model.n_x, small_instance.pd.model.n_u
    assert trace.states.shape == (4, n_x)
    assert trace.inputs.shape == (3, n_u)
    assert trace.stage_costs.shape == (3,)
    assert trace.theta_offsets.shape[0] == 4
    assert len(trace.reports) == 3
    assert log.records == 3
    records = log.read()
    assert records[0]["run_id"] == "small"
    assert records[-1]["theta_offsets"] == trace.theta_offsets[-1].tolist()

    problems = verify_trace(trace)
    assert not [p for p in problems if "parameter set" in p]

    restored = ClosedLoopTrace.from_dict(json.loads(json.dumps(trace.to_dict())))
    np.testing.assert_allclose(restored.states, trace.states)
    assert restored.X.dim == n_x
    assert verify_trace(restored) == problems


def _trace(**overrides):
    data = dict(
        states=np.zeros((3, 1)),
        inputs=np.zeros((2, 1)),
        stage_costs=np.array([1.0, 1.0]),
        theta_offsets=np.array([[0.1, 0.1], [0.08, 0.1], [0.08, 0.05]]),
        theta_H=np.array([[1.0], [-1.0]]),
        reports=[
            {"J_bar": [5.0], "sigma_hat": 0.1},
            {"J_bar": [4.0], "sigma_hat": 0.1},
            {"J_bar": [3.0], "sigma_hat": 0.1},
        ],
        disturbances=np.zeros((2, 1)),
        theta_star=np.array([0.0]),
        X=HPolytope.full_space(1),
        U=HPolytope.box(1.0, 1),
        sigma_bar=1.0,
    )
    data.update(overrides)
    return ClosedLoopTrace(**data)


def test_verify_trace_flags_violations():
    assert verify_trace(_trace()) == []
    assert verify_trace(_trace(inputs=np.array([[0.5], [1.5]]))) == ["t = 1: input outside U"]
    grown = np.array([[0.1, 0.1], [0.12, 0.1], [0.12, 0.1]])
    assert "t = 1: parameter set grew" in verify_trace(_trace(theta_offsets=grown))
    excluded = np.array([[0.1, 0.1], [0.1, -0.02], [0.1, -0.02]])
    assert "t = 1: parameter set excludes theta*" in verify_trace(_trace(theta_offsets=excluded))
    rising = [
        {"J_bar": [5.0], "sigma_hat": 0.1},
        {"J_bar": [4.5], "sigma_hat": 0.1},
        {"J_bar": [], "sigma_hat": 0.0},
    ]
    # 4.5 > 5 - 1 + 0.01
    problems = verify_trace(_trace(reports=rising))
    assert len(problems) == 1
    assert problems[0].startswith("t = 1: cost increased")


def test_suboptimality_and_slope():
    assert suboptimality(3.0, 2.0) == pytest.approx(0.5)
    assert np.isnan(suboptimality(3.0, None))
    assert np.isnan(suboptimality(3.0, 0.0))
    n_theta = [1, 3, 7]
    counts = [5.0 * (n + 1) ** 2 for n in n_theta]
    assert soc_scaling_slope(n_theta, counts) == pytest.approx(2.0)


def test_summarize():
    keys = dict(n_x=2, n_u=1, n_theta=2, N=5)
    metrics = dict(
        iteration_time_mean=0.1, iteration_time_min=0.05, iteration_time_max=0.2, convergence_time=0.3,
        iterations_mean=2.0, n_vars=40, n_linear_rows=10, n_equality_rows=10, n_soc_blocks=30,
        suboptimality=0.1, realized_cost_mean=0.5, violations=0,
    )
    slower = {**metrics, "suboptimality": 0.3, "iteration_time_max": 0.4}
    raw = pd.DataFrame(
        [
            {**keys, "seed": 0, "rejected": False, **metrics},
            {**keys, "seed": 1, "rejected": False, **slower},
            {**keys, "seed": 2, "rejected": True},
        ]
    )
    summary = summarize(raw)
    assert len(summary) == 1
    row = summary.iloc[0]
    assert row["instances"] == 2
    assert row["rejected"] == 1
    assert row["suboptimality"] == pytest.approx(0.2)
    assert row["iteration_time_max"] == pytest.approx(0.4)
    assert row["suboptimality_missing"] == 0
    assert summarize(raw[raw["rejected"]]).empty

    no_baseline = raw.copy()
    no_baseline.loc[1, "suboptimality"] = np.nan
    row = summarize(no_baseline).iloc[0]
    assert row["suboptimality"] == pytest.approx(0.1)
    assert row["suboptimality_missing"] == 1


def test_sweep_metadata(small_spec):
    meta = sweep_metadata([small_spec], ControllerConfig())
    assert meta["sizes"][0]["n_x"] == 2
    assert meta["gamma_rule"] == "lemma"
    assert "certainty-equivalent" in meta["suboptimality_baseline"]


@pytest.mark.slow
def test_run_instance(small_spec):
    row = run_instance(small_spec, small_spec.seed)
    assert row["n_x"] == 2
    if not row["rejected"]:
        assert row["n_soc_blocks"] > 0
        assert row["iteration_time_min"] <= row["iteration_time_max"]


@pytest.mark.slow
def test_sweep_orders_rows():
    specs = [
        BenchmarkSpec(2, 1, 1, N=4, T=2, seed=3, instances=2),
        BenchmarkSpec(1, 1, 1, n_w=1, N=4, T=2, instances=1),
    ]
    raw, summary = sweep(specs)
    assert list(raw["n_x"]) == [1, 2, 2]
    assert list(raw.loc[raw["n_x"] == 2, "seed"]) == [3, 4]
    assert set(summary.columns) >= {"n_x", "n_u", "n_theta", "N"}


def _closed_loop(spec, seed, T):
    try:
        return simulate(generate_instance(spec, seed), T=T)
    except (TerminalDesignError, InitialInfeasible):
        return None


@pytest.mark.slow
@pytest.mark.parametrize("size", [(2, 1, 2), (4, 2, 2)])
def test_closed_loop_runs_are_sound(size):
    n_x, n_u, n_theta = size
    spec = BenchmarkSpec(n_x, n_u, n_theta, N=5, T=10)
    traces = [_closed_loop(spec, seed, 10) for seed in range(20)]
    traces = [trace for trace in traces if trace is not None]
    assert traces
    first_iterations = []
    for trace in traces:
        assert verify_trace(trace) == []
        for record in trace.reports:
            assert "ABANDONED" not in record["outcomes"]
            assert record["J_bar"]
        for h in trace.theta_offsets:
            # the simplex template keeps n_theta + 1 vertices
            assert len(vertices(HPolytope(trace.theta_H, h)).vertices) == n_theta + 1
        first_iterations.append(trace.reports[0]["iterations"])
    assert 2.0 <= np.mean(first_iterations) <= 8.0
    assert np.mean([r["iterations"] for trace in traces for r in trace.reports]) <= 8.0


@pytest.mark.slow
def test_long_run_average_cost():
    spec = BenchmarkSpec(2, 1, 2, N=5, T=200)
    trace = None
    for seed in range(10):
        trace = _closed_loop(spec, seed, 200)
        if trace is not None:
            break
    assert trace is not None
    assert verify_trace(trace) == []
    J = [r["J_bar"][-1] for r in trace.reports]
    sigma_hat = np.array([r["sigma_hat"] for r in trace.reports])
    # summed cost decrease
    slack = 1e-6 * np.sum(1.0 + np.abs(J))
    assert trace.stage_costs[:-1].sum() <= J[0] - J[-1] + np.sum(sigma_hat[:-1] ** 2) + slack
    assert trace.stage_costs[100:].mean() <= trace.sigma_bar ** 2 + 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("size, seeds", [((4, 2, 2), [3]), ((2, 1, 2), [0, 1, 2, 3])])
def test_suboptimality_is_finite(size, seeds):
    spec = BenchmarkSpec(*size, N=5, T=4)
    rows = [run_instance(spec, seed) for seed in seeds]
    accepted = [row for row in rows if not row["rejected"]]
    assert accepted
    for row in accepted:
        assert np.isfinite(row["suboptimality"])
        assert row["suboptimality"] >= -1e-6
