from datetime import datetime

import numpy as np
import pytest

from gridcharge.controllers import KIND_CONST, KIND_MAX, KIND_MIN, make_controller
from gridcharge.data import synth_scenario
from gridcharge.domain import ChargingRequest, Household, Scenario, Timebase
from gridcharge.oracle import OracleResult, optimal_schedule, project_capped_simplex
from gridcharge.simulator import objective_std, simulate

MONDAY = datetime(2026, 3, 2)


def test_projection_splits_evenly_without_caps():
    x = project_capped_simplex(
        np.array([[0.0, 0.0]]), np.array([[10.0, 10.0]]), np.array([5.0])
    )
    assert np.allclose(x, [[2.5, 2.5]], atol=1e-12)


def test_projection_respects_caps():
    x = project_capped_simplex(
        np.array([[10.0, 0.0]]), np.array([[3.0, 10.0]]), np.array([5.0])
    )
    assert np.allclose(x, [[3.0, 2.0]], atol=1e-9)


def test_projection_zero_target_gives_zeros():
    x = project_capped_simplex(
        np.array([[4.0, 4.0]]), np.array([[5.0, 5.0]]), np.array([0.0])
    )
    assert np.array_equal(x, [[0.0, 0.0]])


def test_projection_is_idempotent():
    rng = np.random.default_rng(0)
    v = rng.normal(0, 3, (5, 8))
    upper = rng.uniform(0.5, 4.0, (5, 8))
    target = 0.6 * upper.sum(axis=1)
    once = project_capped_simplex(v, upper, target)
    twice = project_capped_simplex(once, upper, target)
    assert np.allclose(once, twice, atol=1e-10)
    assert np.allclose(once.sum(axis=1), target, atol=1e-10)
    assert np.all(once >= 0) and np.all(once <= upper + 1e-12)


def test_projection_ignores_padding_columns():
    # upper == 0 marks padding; it must stay zero and not absorb energy
    v = np.array([[2.0, 2.0, 9.0]])
    upper = np.array([[5.0, 5.0, 0.0]])
    x = project_capped_simplex(v, upper, np.array([4.0]))
    assert x[0, 2] == 0.0
    assert x[0].sum() == pytest.approx(4.0, abs=1e-10)


def test_two_step_toy_solved_exactly():
    """One request, 2.5 kWh, into base loads [0, 10]: all charging belongs in
    the first step at 10 kW, flattening the total to [10, 10]."""
    h = Household(
        household_id="h0",
        baseline_load=np.array([0.0, 10.0]),
        requests=(ChargingRequest("h0", 0, 2, 2.5, 10.0),),
    )
    sc = Scenario(timebase=Timebase(start=MONDAY, n_steps=2), households=(h,))
    res = optimal_schedule(sc, warmup_steps=0)
    assert np.allclose(res.schedule, [[10.0, 0.0]], atol=1e-6)
    assert res.objective_std_kw == pytest.approx(0.0, abs=1e-6)
    assert res.converged
    assert np.allclose(res.result.grid_load, [10.0, 10.0], atol=1e-6)


def test_oracle_lower_bounds_every_baseline():
    sc, _, _ = synth_scenario(n_households=4, split_days=(2, 1, 1), seed=17)
    oracle = optimal_schedule(sc)
    for kind in (KIND_CONST, KIND_MIN, KIND_MAX):
        std = objective_std(simulate(sc, make_controller(kind)))
        assert oracle.objective_std_kw <= std + 1e-9


def test_oracle_schedule_is_feasible():
    sc, _, _ = synth_scenario(n_households=4, split_days=(2, 1, 1), seed=17)
    res = optimal_schedule(sc)
    dh = sc.timebase.step_hours
    covered = np.zeros((sc.n_households, sc.timebase.n_steps), dtype=bool)
    for hi, h in enumerate(sc.households):
        for r in h.requests:
            window = res.schedule[hi, r.t_arrive : r.t_depart]
            covered[hi, r.t_arrive : r.t_depart] = True
            assert np.all(window <= r.max_kw + 1e-9)
            assert np.all(window >= -1e-12)
            assert window.sum() * dh == pytest.approx(r.required_energy, abs=1e-6)
    assert np.all(res.schedule[~covered] == 0.0)


def test_oracle_result_consistent_with_its_simulation():
    sc, _, _ = synth_scenario(n_households=3, split_days=(2, 1, 1), seed=8)
    res = optimal_schedule(sc)
    base = sc.baseline_matrix().sum(axis=0)
    assert np.allclose(res.result.grid_load, base + res.schedule.sum(axis=0))
    assert res.objective_std_kw == objective_std(res.result)
    assert res.result.warmup_steps == sc.timebase.steps_per_day


def test_oracle_without_requests_returns_baseline():
    h = Household("h0", np.array([1.0, 2.0, 3.0, 4.0]))
    sc = Scenario(timebase=Timebase(start=MONDAY, n_steps=4), households=(h,))
    res = optimal_schedule(sc, warmup_steps=0)
    assert isinstance(res, OracleResult)
    assert np.array_equal(res.schedule, np.zeros((1, 4)))
    assert res.objective_std_kw == pytest.approx(float(np.std([1.0, 2.0, 3.0, 4.0])))
    assert res.converged
    assert res.iterations == 0


def test_oracle_beats_const_when_deferral_helps():
    # base has a peak in the request window; const charges through it, the
    # oracle shifts energy into the quiet half
    base = np.array([1.0, 1.0, 8.0, 8.0, 1.0, 1.0, 1.0, 1.0])
    h = Household(
        household_id="h0",
        baseline_load=base,
        requests=(ChargingRequest("h0", 0, 8, 4.0, 6.0),),
    )
    sc = Scenario(timebase=Timebase(start=MONDAY, n_steps=8), households=(h,))
    oracle = optimal_schedule(sc, warmup_steps=0)
    const = objective_std(simulate(sc, make_controller(KIND_CONST), warmup_steps=0))
    assert oracle.objective_std_kw < const - 0.1
    # no charging lands on the two peak steps
    assert np.allclose(oracle.schedule[0, 2:4], 0.0, atol=1e-6)
