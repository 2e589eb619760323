"""Core data model: timebase, charging requests, scenarios, and request lifecycle.

All energy is accounted in kWh and all power in kW; a charging "speed" is a
power in kW held for one simulation step. Converting between the two uses
``step_hours = step_seconds / 3600``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

SECONDS_PER_DAY = 86400

# A request whose remaining energy falls to or below this is finished; prevents
# an extra step of infinitesimal charging.
FINISH_TOL_KWH = 1e-9

# Post-run audit tolerance for delivered-vs-requested energy.
ENERGY_TOL_KWH = 1e-6


@dataclass(frozen=True)
class Timebase:
    """Uniform discrete time grid anchored at an absolute start timestamp."""

    start: datetime
    n_steps: int
    step_seconds: int = 900

    def __post_init__(self) -> None:
        if self.step_seconds <= 0 or SECONDS_PER_DAY % self.step_seconds != 0:
            raise ValidationError(
                f"step_seconds must be a positive divisor of 86400, got {self.step_seconds}"
            )
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def step_hours(self) -> float:
        return self.step_seconds / 3600.0

    @property
    def steps_per_day(self) -> int:
        return SECONDS_PER_DAY // self.step_seconds

    @property
    def steps_per_hour(self) -> int:
        if 3600 % self.step_seconds != 0:
            raise ValidationError(
                f"hour-lagged features need step_seconds to divide 3600, got {self.step_seconds}"
            )
        return 3600 // self.step_seconds

    def step_to_datetime(self, t: int) -> datetime:
        return self.start + timedelta(seconds=t * self.step_seconds)

    def datetime_to_step(self, when: datetime) -> int:
        delta = (when - self.start).total_seconds()
        steps = delta / self.step_seconds
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError(f"timestamp {when.isoformat()} is not aligned to the step grid")
        return int(round(steps))

    def seconds_of_day(self, t: int) -> int:
        start_sec = self.start.hour * 3600 + self.start.minute * 60 + self.start.second
        return (start_sec + t * self.step_seconds) % SECONDS_PER_DAY

    def day_of_week(self, t: int) -> int:
        """Day of week at step t, Monday=0 .. Sunday=6."""
        return self.step_to_datetime(t).weekday()


@dataclass(frozen=True)
class ChargingRequest:
    """One vehicle-availability interval with an energy demand and a rate limit.

    The car may charge at steps t with ``t_arrive <= t < t_depart``, must
    receive ``required_energy`` kWh by departure, and never charges above
    ``max_kw``.
    """

    household_id: str
    t_arrive: int
    t_depart: int
    required_energy: float
    max_kw: float

    def __post_init__(self) -> None:
        if self.t_arrive >= self.t_depart:
            raise ValidationError(
                f"request for {self.household_id}: t_arrive={self.t_arrive} must be < "
                f"t_depart={self.t_depart}"
            )
        if self.required_energy < 0:
            raise ValidationError(
                f"request for {self.household_id}: required_energy must be >= 0"
            )
        if self.max_kw <= 0:
            raise ValidationError(f"request for {self.household_id}: max_kw must be > 0")

    @property
    def total_steps(self) -> int:
        return self.t_depart - self.t_arrive

    def max_deliverable_kwh(self, step_hours: float) -> float:
        return self.max_kw * self.total_steps * step_hours


@dataclass(frozen=True)
class Household:
    household_id: str
    baseline_load: np.ndarray
    requests: tuple[ChargingRequest, ...] = ()


@dataclass(frozen=True)
class Scenario:
    """Per-household baseline load series plus request sets on one timebase."""

    timebase: Timebase
    households: tuple[Household, ...]

    def __post_init__(self) -> None:
        tb = self.timebase
        seen: set[str] = set()
        for h in self.households:
            if h.household_id in seen:
                raise ValidationError(f"duplicate household_id {h.household_id!r}")
            seen.add(h.household_id)
            load = np.asarray(h.baseline_load, dtype=float)
            if load.shape != (tb.n_steps,):
                raise ValidationError(
                    f"household {h.household_id}: baseline series has length {load.shape}, "
                    f"expected ({tb.n_steps},)"
                )
            if not np.all(np.isfinite(load)):
                raise ValidationError(f"household {h.household_id}: baseline has non-finite values")
            if np.any(load < 0):
                raise ValidationError(f"household {h.household_id}: baseline has negative values")
            prev_depart = -1
            for req in h.requests:
                if req.household_id != h.household_id:
                    raise ValidationError(
                        f"request owner {req.household_id!r} filed under {h.household_id!r}"
                    )
                if req.t_arrive < prev_depart:
                    raise ValidationError(
                        f"household {h.household_id}: requests overlap or are unsorted "
                        f"near step {req.t_arrive}"
                    )
                if req.t_arrive < 0 or req.t_depart > tb.n_steps:
                    raise ValidationError(
                        f"household {h.household_id}: request [{req.t_arrive},{req.t_depart}) "
                        f"outside scenario of {tb.n_steps} steps"
                    )
                if req.required_energy > req.max_deliverable_kwh(tb.step_hours) + FINISH_TOL_KWH:
                    raise ValidationError(
                        f"household {h.household_id}: request at step {req.t_arrive} needs "
                        f"{req.required_energy:.6f} kWh but can deliver at most "
                        f"{req.max_deliverable_kwh(tb.step_hours):.6f} kWh"
                    )
                prev_depart = req.t_depart

    @property
    def n_households(self) -> int:
        return len(self.households)

    def baseline_matrix(self) -> np.ndarray:
        """Stacked (households, n_steps) baseline loads in kW."""
        return np.stack([np.asarray(h.baseline_load, dtype=float) for h in self.households])

    def all_requests(self) -> list[ChargingRequest]:
        return [req for h in self.households for req in h.requests]


def slice_scenario(scenario: Scenario, start_step: int, end_step: int) -> Scenario:
    """Extract the sub-scenario covering steps [start_step, end_step).

    Requests that cross either boundary are dropped: their mid-interval state
    is not representable in the slice.
    """
    tb = scenario.timebase
    if not (0 <= start_step < end_step <= tb.n_steps):
        raise ValidationError(
            f"slice [{start_step},{end_step}) outside scenario of {tb.n_steps} steps"
        )
    new_tb = Timebase(
        start=tb.step_to_datetime(start_step),
        n_steps=end_step - start_step,
        step_seconds=tb.step_seconds,
    )
    households = []
    for h in scenario.households:
        reqs = tuple(
            ChargingRequest(
                household_id=r.household_id,
                t_arrive=r.t_arrive - start_step,
                t_depart=r.t_depart - start_step,
                required_energy=r.required_energy,
                max_kw=r.max_kw,
            )
            for r in h.requests
            if r.t_arrive >= start_step and r.t_depart <= end_step
        )
        households.append(
            Household(
                household_id=h.household_id,
                baseline_load=np.asarray(h.baseline_load, dtype=float)[start_step:end_step],
                requests=reqs,
            )
        )
    return Scenario(timebase=new_tb, households=tuple(households))


@dataclass(frozen=True)
class ActiveRequest:
    """View of one request that is live at a query step."""

    request: ChargingRequest
    remaining_energy: float
    remaining_steps: int


class RequestBook:
    """Request lifecycle bookkeeping for one simulation run.

    Tracks remaining energy per request, answers "which request is active for
    household h at step t", and applies per-step charging decrements. All
    per-step queries are vectorized over households; `active_request` exposes
    the single-household view.
    """

    def __init__(self, scenario: Scenario):
        tb = scenario.timebase
        self.step_hours = tb.step_hours
        self.n_households = scenario.n_households
        self.n_steps = tb.n_steps
        self.requests = scenario.all_requests()
        n_req = len(self.requests)

        self.house = np.empty(n_req, dtype=np.int32)
        self.arrive = np.empty(n_req, dtype=np.int64)
        self.depart = np.empty(n_req, dtype=np.int64)
        self.required = np.empty(n_req, dtype=float)
        self.max_kw = np.empty(n_req, dtype=float)
        r = 0
        for hi, h in enumerate(scenario.households):
            for req in h.requests:
                self.house[r] = hi
                self.arrive[r] = req.t_arrive
                self.depart[r] = req.t_depart
                self.required[r] = req.required_energy
                self.max_kw[r] = req.max_kw
                r += 1

        # Per-(household, step) id of the request whose interval covers the
        # step, or -1. Intervals are disjoint per household, so this is unique.
        self.slot = np.full((self.n_households, tb.n_steps), -1, dtype=np.int32)
        for r in range(n_req):
            self.slot[self.house[r], self.arrive[r]:self.depart[r]] = r

        self.remaining = self.required.copy()
        self.enabled = np.ones(n_req, dtype=bool)

    def reset(self, start_step: int = 0) -> None:
        """Restore full remaining energy; disable requests arriving before start_step."""
        self.remaining[:] = self.required
        self.enabled[:] = self.arrive >= start_step

    def ids_at(self, t: int) -> np.ndarray:
        return self.slot[:, t]

    def active_mask(self, ids: np.ndarray) -> np.ndarray:
        """Active = interval covers t, request enabled, energy still owed."""
        covered = ids >= 0
        safe = np.where(covered, ids, 0)
        return covered & self.enabled[safe] & (self.remaining[safe] > FINISH_TOL_KWH)

    def apply_charging(self, ids: np.ndarray, active: np.ndarray, charge_kw: np.ndarray) -> None:
        """Decrement remaining energy with the charging applied at the ids' step."""
        live = ids[active]
        self.remaining[live] = np.maximum(
            0.0, self.remaining[live] - charge_kw[active] * self.step_hours
        )

    def check_feasible(self, t: int, ids: np.ndarray, active: np.ndarray) -> None:
        live = ids[active]
        headroom = self.max_kw[live] * (self.depart[live] - t) * self.step_hours
        bad = self.remaining[live] > headroom + ENERGY_TOL_KWH
        if np.any(bad):
            r = int(live[np.argmax(bad)])
            req = self.requests[r]
            raise ValidationError(
                f"request for {req.household_id} at step {req.t_arrive} became infeasible at "
                f"step {t}: {self.remaining[r]:.6f} kWh owed, {headroom[np.argmax(bad)]:.6f} "
                f"kWh deliverable"
            )

    def active_request(self, house_index: int, t: int) -> ActiveRequest | None:
        """The unique live request for a household at step t, if any."""
        r = int(self.slot[house_index, t])
        if r < 0 or not self.enabled[r] or self.remaining[r] <= FINISH_TOL_KWH:
            return None
        return ActiveRequest(
            request=self.requests[r],
            remaining_energy=float(self.remaining[r]),
            remaining_steps=int(self.depart[r] - t),
        )

    def audit_completion(self, end_step: int) -> None:
        """Every enabled request due by end_step must be fully served."""
        due = self.enabled & (self.depart <= end_step)
        owed = self.remaining[due]
        if owed.size and np.max(owed) > ENERGY_TOL_KWH:
            r = int(np.flatnonzero(due)[np.argmax(owed)])
            req = self.requests[r]
            raise SimulationIncomplete(
                f"request for {req.household_id} departing at step {req.t_depart} left "
                f"{np.max(owed):.3e} kWh undelivered"
            )

    def delivered(self) -> np.ndarray:
        return self.required - self.remaining


class SimulationIncomplete(ValidationError):
    """A request reached its departure with energy still owed."""


@dataclass(frozen=True)
class SimResult:
    """Total grid load plus the per-household charging that produced it."""

    timebase: Timebase
    grid_load: np.ndarray               # (n_steps,) kW
    per_household_charging: np.ndarray  # (households, n_steps) kW
    warmup_steps: int


# ---------------------------------------------------------------------------
# Scenario serialization: loads.csv + requests.csv
# ---------------------------------------------------------------------------

LOADS_HEADER = ["timestamp", "household_id", "baseline_kw"]
REQUESTS_HEADER = ["household_id", "t_arrive_iso", "t_depart_iso", "required_kwh", "max_kw"]


def save_scenario(scenario: Scenario, directory: str | Path) -> None:
    """Write loads.csv and requests.csv into directory (created if missing).

    Floats are written with repr so a round-trip reproduces them exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tb = scenario.timebase
    with open(directory / "loads.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOADS_HEADER + [f"step_seconds={tb.step_seconds}"])
        for h in scenario.households:
            for t in range(tb.n_steps):
                w.writerow(
                    [tb.step_to_datetime(t).isoformat(), h.household_id, repr(float(h.baseline_load[t]))]
                )
    with open(directory / "requests.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REQUESTS_HEADER)
        for h in scenario.households:
            for r in h.requests:
                w.writerow(
                    [
                        h.household_id,
                        tb.step_to_datetime(r.t_arrive).isoformat(),
                        tb.step_to_datetime(r.t_depart).isoformat(),
                        repr(float(r.required_energy)),
                        repr(float(r.max_kw)),
                    ]
                )


def _parse_float(value: str, what: str, row: int, file: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ValidationError(f"{file} row {row}: bad {what} {value!r}") from None


def _parse_iso(value: str, what: str, row: int, file: str) -> datetime:
    try:
        return datetime.fromisoformat(value)
    except ValueError:
        raise ValidationError(f"{file} row {row}: bad {what} {value!r}") from None


def load_scenario(directory: str | Path) -> Scenario:
    """Read loads.csv and requests.csv back into a validated Scenario.

    Errors cite the offending file and row number.
    """
    directory = Path(directory)
    loads_path = directory / "loads.csv"
    requests_path = directory / "requests.csv"
    if not loads_path.exists():
        raise ValidationError(f"{directory} is not a dataset directory: {loads_path} missing")

    series: dict[str, list[float]] = {}
    times: dict[str, list[datetime]] = {}
    order: list[str] = []
    step_seconds = 900
    with open(loads_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[: len(LOADS_HEADER)] != LOADS_HEADER:
            raise ValidationError(f"loads.csv row 1: expected header {LOADS_HEADER}")
        for extra in header[len(LOADS_HEADER):]:
            key, _, val = extra.partition("=")
            if key == "step_seconds":
                step_seconds = int(val)
        for i, row in enumerate(reader, start=2):
            if len(row) != len(LOADS_HEADER):
                raise ValidationError(f"loads.csv row {i}: expected {len(LOADS_HEADER)} columns")
            when = _parse_iso(row[0], "timestamp", i, "loads.csv")
            hid = row[1]
            kw = _parse_float(row[2], "baseline_kw", i, "loads.csv")
            if kw < 0:
                raise ValidationError(f"loads.csv row {i}: negative baseline_kw {kw}")
            if hid not in series:
                series[hid] = []
                times[hid] = []
                order.append(hid)
            series[hid].append(kw)
            times[hid].append(when)
    if not order:
        raise ValidationError("loads.csv: no data rows")

    first = order[0]
    n_steps = len(series[first])
    tb = Timebase(start=times[first][0], n_steps=n_steps, step_seconds=step_seconds)
    for hid in order:
        if len(series[hid]) != n_steps:
            raise ValidationError(
                f"loads.csv: household {hid} has {len(series[hid])} rows, expected {n_steps}"
            )
        if times[hid][0] != tb.start:
            raise ValidationError(f"loads.csv: household {hid} does not start at {tb.start}")

    requests: dict[str, list[ChargingRequest]] = {hid: [] for hid in order}
    if requests_path.exists():
        with open(requests_path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != REQUESTS_HEADER:
                raise ValidationError(f"requests.csv row 1: expected header {REQUESTS_HEADER}")
            for i, row in enumerate(reader, start=2):
                if len(row) != len(REQUESTS_HEADER):
                    raise ValidationError(
                        f"requests.csv row {i}: expected {len(REQUESTS_HEADER)} columns"
                    )
                hid = row[0]
                if hid not in requests:
                    raise ValidationError(f"requests.csv row {i}: unknown household {hid!r}")
                arrive = _parse_iso(row[1], "t_arrive_iso", i, "requests.csv")
                depart = _parse_iso(row[2], "t_depart_iso", i, "requests.csv")
                kwh = _parse_float(row[3], "required_kwh", i, "requests.csv")
                max_kw = _parse_float(row[4], "max_kw", i, "requests.csv")
                if kwh <= 0:
                    continue  # zero-energy requests are dropped before simulation
                try:
                    req = ChargingRequest(
                        household_id=hid,
                        t_arrive=tb.datetime_to_step(arrive),
                        t_depart=tb.datetime_to_step(depart),
                        required_energy=kwh,
                        max_kw=max_kw,
                    )
                except ValidationError as exc:
                    raise ValidationError(f"requests.csv row {i}: {exc}") from None
                requests[hid].append(req)

    households = tuple(
        Household(
            household_id=hid,
            baseline_load=np.asarray(series[hid], dtype=float),
            requests=tuple(sorted(requests[hid], key=lambda r: r.t_arrive)),
        )
        for hid in order
    )
    return Scenario(timebase=tb, households=households)
