"""Discrete-time grid simulation driving one controller per household.

Each step the engine settles the previous step's charging against the open
requests, lets every household observe its own load (and, in grid input mode,
the total load), asks the controller for charging speeds, and caps delivery
at what each request still needs. The first simulated day is treated as
warmup and excluded from the reported statistics.

The kernel is deliberately table-driven: everything about a request that does
not depend on charging decisions (who is plugged in when, rate limits,
deadline headroom) is precomputed per scenario as (step, household) arrays,
because training evaluates thousands of candidate controllers on the same
scenario and the per-step Python cost dominates.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .controllers import LearnedController, RuleController
from .domain import (
    ENERGY_TOL_KWH,
    FINISH_TOL_KWH,
    RequestBook,
    Scenario,
    SimResult,
    SimulationIncomplete,
    Timebase,
    slice_scenario,
)
from .errors import SimulationError
from .features import INPUT_ALL, RollingBuffer, encode_time_of_day, history_block

Controller = LearnedController | RuleController

N_LOCAL_FEATURES = 12  # clock + request state + household history block


def default_warmup(timebase: Timebase, n_steps: int | None = None) -> int:
    """One day of steps, or nothing when the run is too short to spare it."""
    n = timebase.n_steps if n_steps is None else n_steps
    per_day = timebase.steps_per_day
    return per_day if n > per_day else 0


class SimKernel:
    """Per-scenario precomputation reused across many simulation runs."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.timebase = scenario.timebase
        tb = self.timebase
        n_steps = tb.n_steps
        n_house = scenario.n_households
        self.base = scenario.baseline_matrix()
        self.base_total = self.base.sum(axis=0)
        self.book = RequestBook(scenario)

        self.clock = np.empty((n_steps, 3))
        for t in range(n_steps):
            c, s = encode_time_of_day(tb.seconds_of_day(t))
            self.clock[t, 0] = c
            self.clock[t, 1] = s
            self.clock[t, 2] = 0.0 if tb.day_of_week(t) >= 5 else 1.0

        # Request-state tables indexed [step, household]; zero outside any
        # request's interval. Inverses are precomputed so the hot loop only
        # multiplies.
        shape = (n_steps, n_house)
        self.covered = np.zeros(shape, dtype=bool)
        self.rem_steps = np.zeros(shape)
        self.total_steps = np.zeros(shape)
        self.required = np.zeros(shape)
        self.max_kw = np.zeros(shape)
        self.frac_steps = np.zeros(shape)       # remaining / total steps
        self.inv_required = np.zeros(shape)
        self.inv_rem_energy = np.zeros(shape)   # 1 / (remaining_steps * step_hours)
        self.inv_max_kw = np.zeros(shape)
        self.headroom_tol = np.full(shape, ENERGY_TOL_KWH)  # deliverable + tolerance

        # Sparse per-step events: request arrivals refill the energy owed,
        # departures assert it was served.
        arrivals: dict[int, tuple[list[int], list[float]]] = {}
        departures: dict[int, list[int]] = {}
        dh = tb.step_hours
        book = self.book
        for r in range(len(book.requests)):
            h = int(book.house[r])
            t0 = int(book.arrive[r])
            t1 = int(book.depart[r])
            span = np.arange(t0, t1)
            left = (t1 - span).astype(float)
            self.covered[t0:t1, h] = True
            self.rem_steps[t0:t1, h] = left
            self.total_steps[t0:t1, h] = t1 - t0
            self.required[t0:t1, h] = book.required[r]
            self.max_kw[t0:t1, h] = book.max_kw[r]
            self.frac_steps[t0:t1, h] = left / (t1 - t0)
            if book.required[r] > 0:
                self.inv_required[t0:t1, h] = 1.0 / book.required[r]
            self.inv_rem_energy[t0:t1, h] = 1.0 / (left * dh)
            self.inv_max_kw[t0:t1, h] = 1.0 / book.max_kw[r]
            self.headroom_tol[t0:t1, h] = book.max_kw[r] * left * dh + ENERGY_TOL_KWH
            arrivals.setdefault(t0, ([], []))[0].append(h)
            arrivals.setdefault(t0, ([], []))[1].append(float(book.required[r]))
            departures.setdefault(t1, []).append(h)
        self.arrivals = {
            t: (np.asarray(rows, dtype=np.intp), np.asarray(vals))
            for t, (rows, vals) in arrivals.items()
        }
        self.departures = {t: np.asarray(rows, dtype=np.intp) for t, rows in departures.items()}

    def _audit_departures(self, t: int, remaining: np.ndarray) -> None:
        rows = self.departures.get(t)
        if rows is None:
            return
        owed = remaining[rows]
        if np.any(owed > ENERGY_TOL_KWH):
            h = int(rows[int(np.argmax(owed))])
            raise SimulationIncomplete(
                f"request for {self.scenario.households[h].household_id} departing at "
                f"step {t} left {float(np.max(owed)):.3e} kWh undelivered"
            )

    def run(
        self,
        controller: Controller,
        *,
        start_step: int = 0,
        end_step: int | None = None,
        warmup_steps: int | None = None,
    ) -> SimResult:
        """Simulate steps [start_step, end_step) from a cold start.

        Requests that arrived before start_step are skipped: a window has no
        way to know how much of them was already served.
        """
        tb = self.timebase
        end = tb.n_steps if end_step is None else end_step
        if not (0 <= start_step < end <= tb.n_steps):
            raise SimulationError(f"bad simulation range [{start_step},{end})")
        n_out = end - start_step
        if warmup_steps is None:
            warmup_steps = default_warmup(tb, n_out)
        if warmup_steps >= n_out:
            raise SimulationError(
                f"warmup of {warmup_steps} steps leaves nothing of a {n_out}-step run"
            )

        n_house = self.scenario.n_households
        dh = tb.step_hours
        inv_dh = 1.0 / dh
        controller.reset(n_house)

        grid_mode = controller.needs_features and controller.params.input_mode == INPUT_ALL
        x = None
        buf = None
        hist = None
        obs = None
        if controller.needs_features:
            steps_per_hour = tb.steps_per_hour
            width = N_LOCAL_FEATURES + (5 if grid_mode else 0)
            x = np.zeros((n_house, width))
            # One extra buffer row carries the grid total so the whole
            # history block is computed in a single pass.
            rows = n_house + 1 if grid_mode else n_house
            buf = RollingBuffer(rows, tb.steps_per_day)
            hist = np.empty((rows, 5))
            obs = np.empty(rows)

        grid = np.empty(n_out)
        charging = np.zeros((n_house, n_out))
        remaining = np.zeros(n_house)
        delivered = np.zeros(n_house)

        for t in range(start_step, end):
            self._audit_departures(t, remaining)
            arrival = self.arrivals.get(t)
            if arrival is not None:
                remaining[arrival[0]] = arrival[1]

            active = self.covered[t] & (remaining > FINISH_TOL_KWH)
            if np.any(remaining > self.headroom_tol[t]):
                h = int(np.argmax(remaining - self.headroom_tol[t]))
                raise SimulationIncomplete(
                    f"household {self.scenario.households[h].household_id} cannot finish "
                    f"its request from step {t}: {remaining[h]:.6f} kWh owed"
                )

            if controller.needs_features:
                np.add(self.base[:, t], delivered, out=obs[:n_house])
                if grid_mode:
                    obs[n_house] = obs[:n_house].sum()
                buf.push(obs)
                x[:, 0:3] = self.clock[t]
                np.multiply(self.frac_steps[t], active, out=x[:, 3])
                x[:, 4] = remaining * self.inv_required[t] * active
                flat = remaining * self.inv_rem_energy[t]
                np.minimum(flat, self.max_kw[t], out=flat)
                x[:, 5] = flat * self.inv_max_kw[t] * active
                x[:, 6] = x[:, 5]
                history_block(buf, steps_per_hour, out=hist)
                x[:, 7:12] = hist[:n_house]
                if grid_mode:
                    x[:, 12:17] = hist[n_house]

            speeds = controller.step(
                x,
                active,
                remaining,
                self.rem_steps[t],
                self.total_steps[t],
                self.required[t],
                self.max_kw[t],
                dh,
            )
            delivered = np.minimum(speeds, np.maximum(remaining, 0.0) * inv_dh)

            i = t - start_step
            charging[:, i] = delivered
            total = self.base_total[t] + delivered.sum()
            if not math.isfinite(total):
                raise SimulationError(f"controller produced a non-finite load at step {t}")
            grid[i] = total
            remaining -= delivered * dh

        self._audit_departures(end, remaining)

        result_tb = Timebase(
            start=tb.step_to_datetime(start_step), n_steps=n_out, step_seconds=tb.step_seconds
        )
        return SimResult(
            timebase=result_tb,
            grid_load=grid,
            per_household_charging=charging,
            warmup_steps=warmup_steps,
        )


def simulate(
    scenario: Scenario,
    controller: Controller,
    *,
    start_step: int = 0,
    end_step: int | None = None,
    warmup_steps: int | None = None,
) -> SimResult:
    """One-shot convenience wrapper around SimKernel."""
    return SimKernel(scenario).run(
        controller, start_step=start_step, end_step=end_step, warmup_steps=warmup_steps
    )


# ---------------------------------------------------------------------------
# Result statistics and export
# ---------------------------------------------------------------------------


def objective_std(result: SimResult) -> float:
    """Standard deviation of the total grid load after warmup (the quantity
    training minimizes)."""
    return float(np.std(result.grid_load[result.warmup_steps :]))


def load_changes(result: SimResult) -> np.ndarray:
    """Step-to-step changes of the post-warmup grid load, in kW."""
    return np.diff(result.grid_load[result.warmup_steps :])


def result_metrics(result: SimResult) -> dict[str, float | int]:
    post = result.grid_load[result.warmup_steps :]
    step_hours = result.timebase.step_hours
    return {
        "std_kw": float(np.std(post)),
        "min_kw": float(np.min(post)),
        "p2_5_kw": float(np.percentile(post, 2.5)),
        "p97_5_kw": float(np.percentile(post, 97.5)),
        "max_kw": float(np.max(post)),
        "mean_kw": float(np.mean(post)),
        "charging_kwh": float(result.per_household_charging.sum() * step_hours),
        "warmup_steps": int(result.warmup_steps),
        "n_steps": int(result.timebase.n_steps),
    }


def write_loads_out_csv(result: SimResult, path: str | Path) -> None:
    tb = result.timebase
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "timestamp", "grid_kw", "charging_kw_total"])
        totals = result.per_household_charging.sum(axis=0)
        for t in range(tb.n_steps):
            w.writerow(
                [
                    t,
                    tb.step_to_datetime(t).isoformat(),
                    repr(float(result.grid_load[t])),
                    repr(float(totals[t])),
                ]
            )


def write_metrics_json(result: SimResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result_metrics(result), indent=2) + "\n")


def write_changes_csv(result: SimResult, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["change_kw"])
        for v in load_changes(result):
            w.writerow([repr(float(v))])


__all__ = [
    "SimKernel",
    "simulate",
    "objective_std",
    "load_changes",
    "result_metrics",
    "write_loads_out_csv",
    "write_metrics_json",
    "write_changes_csv",
    "default_warmup",
    "slice_scenario",
]
