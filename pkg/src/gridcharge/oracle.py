"""Centralized lower bound on achievable load flatness.

With every request's charging schedule chosen jointly and in hindsight, the
flattest total load is the solution of a convex problem: minimize the sum of
squared per-step total loads subject to each request's box constraint
(0 <= speed <= its rate limit) and energy equality. Projected gradient
descent with an exact per-request projection solves it to high precision.
No causal controller can beat the resulting spread, which makes it the
yardstick trained controllers are compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import Scenario, SimResult, Timebase
from .errors import SimulationError
from .simulator import default_warmup, objective_std


@dataclass(frozen=True)
class OracleResult:
    """Optimal joint schedule and the simulated result it produces."""

    schedule: np.ndarray  # (households, n_steps) charging kW
    result: SimResult
    objective_std_kw: float
    converged: bool
    iterations: int


def project_capped_simplex(
    v: np.ndarray, upper: np.ndarray, target: np.ndarray, *, rounds: int = 60
) -> np.ndarray:
    """Row-wise Euclidean projection onto {x : 0 <= x <= upper, sum(x) = target}.

    Solved by bisection on the shift tau in x = clip(v - tau, 0, upper); the
    row sum is monotone in tau. Rows must be feasible (target <= sum(upper)).
    Padding columns with upper == 0 are pinned to zero automatically.
    """
    lo = (v - upper).min(axis=1)
    hi = v.max(axis=1)
    # Degenerate rows (target 0, or all caps 0) resolve to x = 0.
    for _ in range(rounds):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid[:, None], 0.0, upper).sum(axis=1)
        too_big = s > target
        lo = np.where(too_big, mid, lo)
        hi = np.where(too_big, hi, mid)
    x = np.clip(v - hi[:, None], 0.0, upper)
    return np.where(target[:, None] > 0.0, x, 0.0)


def optimal_schedule(
    scenario: Scenario,
    *,
    warmup_steps: int | None = None,
    max_iterations: int = 200_000,
    rel_tol: float = 1e-9,
    check_every: int = 100,
) -> OracleResult:
    """Jointly optimal charging schedule for a whole scenario.

    Minimizes the sum of squared total loads over all steps; the reported
    spread (like every other result in the toolkit) is computed after
    warmup. Convergence is declared when a block of `check_every` iterations
    improves the objective by less than `rel_tol` in relative terms.
    """
    tb = scenario.timebase
    n_steps = tb.n_steps
    if warmup_steps is None:
        warmup_steps = default_warmup(tb)
    base_total = scenario.baseline_matrix().sum(axis=0)

    requests = scenario.all_requests()
    house_of: list[int] = []
    for hi, h in enumerate(scenario.households):
        house_of.extend([hi] * len(h.requests))
    n_req = len(requests)
    n_house = scenario.n_households

    if n_req == 0:
        schedule = np.zeros((n_house, n_steps))
        result = SimResult(
            timebase=tb,
            grid_load=base_total.copy(),
            per_household_charging=schedule,
            warmup_steps=warmup_steps,
        )
        return OracleResult(
            schedule=schedule,
            result=result,
            objective_std_kw=objective_std(result),
            converged=True,
            iterations=0,
        )

    lengths = np.array([r.total_steps for r in requests])
    width = int(lengths.max())
    upper = np.zeros((n_req, width))
    # Padding cells carry step index n_steps: a scratch slot that never feeds
    # back into the real load.
    step_of = np.full((n_req, width), n_steps, dtype=np.int64)
    target = np.empty(n_req)
    for r, req in enumerate(requests):
        k = req.total_steps
        upper[r, :k] = req.max_kw
        step_of[r, :k] = np.arange(req.t_arrive, req.t_depart)
        target[r] = req.required_energy / tb.step_hours  # sum of kW over steps

    # Exact Lipschitz constant of the gradient: twice the largest number of
    # requests sharing one step.
    counts = np.zeros(n_steps + 1)
    np.add.at(counts, step_of, upper > 0)
    max_overlap = max(float(counts[:n_steps].max()), 1.0)
    eta = 1.0 / (2.0 * max_overlap)

    # Warm start: every request at its flat rate, which is always feasible.
    x = np.where(upper > 0, (target / np.maximum(lengths, 1))[:, None], 0.0)
    x = np.minimum(x, upper)

    def total_load(xx: np.ndarray) -> np.ndarray:
        acc = np.zeros(n_steps + 1)
        np.add.at(acc, step_of, xx)
        return base_total + acc[:n_steps]

    converged = False
    iterations = 0
    load0 = total_load(x)
    f_block = float(np.dot(load0, load0))
    for it in range(1, max_iterations + 1):
        load = total_load(x)
        padded = np.append(load, 0.0)
        grad = 2.0 * padded[step_of]
        x = project_capped_simplex(x - eta * grad, upper, target)
        iterations = it
        if it % check_every == 0:
            load = total_load(x)
            f_now = float(np.dot(load, load))
            if abs(f_block - f_now) <= rel_tol * max(1.0, abs(f_now)):
                converged = True
                break
            f_block = f_now

    delivered = x.sum(axis=1) * tb.step_hours
    worst = float(np.max(np.abs(delivered - np.array([r.required_energy for r in requests]))))
    if worst > 1e-6:
        raise SimulationError(
            f"optimal schedule violates an energy equality by {worst:.3e} kWh"
        )

    schedule = np.zeros((n_house, n_steps))
    for r, req in enumerate(requests):
        k = req.total_steps
        schedule[house_of[r], req.t_arrive : req.t_depart] += x[r, :k]

    result = SimResult(
        timebase=tb,
        grid_load=base_total + schedule.sum(axis=0),
        per_household_charging=schedule,
        warmup_steps=warmup_steps,
    )
    return OracleResult(
        schedule=schedule,
        result=result,
        objective_std_kw=objective_std(result),
        converged=converged,
        iterations=iterations,
    )
