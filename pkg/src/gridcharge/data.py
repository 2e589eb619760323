"""Synthetic scenario generation: household load traces, travel habits,
charging requests, and train/tune/test splits.

The generator produces a neighborhood of households with a double-peaked
daily consumption pattern, weekday commute travel, and one overnight charging
request per travel day. Total charging energy is sized as a configurable
share of overall consumption.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from .domain import (
    ChargingRequest,
    Household,
    Scenario,
    Timebase,
    load_scenario,
    save_scenario,
    slice_scenario,
)
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400

DEFAULT_HOUSEHOLDS = 74
DEFAULT_SPLIT_DAYS = (15, 8, 21)  # train, tune, test
DEFAULT_CHARGING_SHARE = 0.18
MIN_REQUEST_KWH = 0.05

SPLIT_NAMES = ("train", "tune", "test")


@dataclass(frozen=True)
class TravelRecord:
    """One observed car trip: away from `depart_s` to `return_s` (seconds of
    day) on a given day of week (Monday=0)."""

    day_of_week: int
    depart_s: int
    return_s: int

    def __post_init__(self) -> None:
        if not (0 <= self.day_of_week <= 6):
            raise ValidationError(f"day_of_week must be 0..6, got {self.day_of_week}")
        if not (0 <= self.depart_s < self.return_s < SECONDS_PER_DAY):
            raise ValidationError(
                f"travel needs 0 <= depart < return < 86400, got "
                f"({self.depart_s}, {self.return_s})"
            )


def write_travels_csv(records: list[TravelRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["day_of_week", "depart_s", "return_s"])
        for r in records:
            w.writerow([r.day_of_week, r.depart_s, r.return_s])


def read_travels_csv(path: str | Path) -> list[TravelRecord]:
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["day_of_week", "depart_s", "return_s"]:
            raise ValidationError(f"{path} row 1: expected header day_of_week,depart_s,return_s")
        for i, row in enumerate(reader, start=2):
            try:
                records.append(TravelRecord(int(row[0]), int(row[1]), int(row[2])))
            except (ValueError, IndexError):
                raise ValidationError(f"{path} row {i}: malformed travel record") from None
            except ValidationError as exc:
                raise ValidationError(f"{path} row {i}: {exc}") from None
    return records


def build_travel_pool(rng: np.random.Generator, per_day: int = 60) -> list[TravelRecord]:
    """Synthetic trip pool: commute-shaped on weekdays, later and looser on
    weekends."""
    records = []
    for dow in range(7):
        if dow < 5:
            dep = rng.normal(7.7, 0.6, per_day)
            ret = rng.normal(17.6, 0.8, per_day)
            dep = np.clip(dep, 5.0, 11.0)
            ret = np.clip(ret, 13.0, 23.5)
        else:
            dep = np.clip(rng.normal(9.5, 1.0, per_day), 6.0, 13.0)
            ret = np.clip(rng.normal(16.5, 1.5, per_day), 12.0, 23.5)
        ret = np.maximum(ret, dep + 1.5)
        for d, r in zip(dep, ret):
            records.append(
                TravelRecord(dow, int(d * 3600), min(int(r * 3600), SECONDS_PER_DAY - 1))
            )
    return records


def _bump(seconds_of_day: np.ndarray, center_s: float, width_s: float) -> np.ndarray:
    delta = np.abs(seconds_of_day - center_s)
    delta = np.minimum(delta, SECONDS_PER_DAY - delta)  # wrap around midnight
    return np.exp(-0.5 * (delta / width_s) ** 2)


def synth_baselines(
    rng: np.random.Generator, timebase: Timebase, n_households: int
) -> np.ndarray:
    """Baseline load matrix (households, n_steps) in kW.

    Each household is an idle floor plus morning and evening activity bumps,
    a weekend multiplier, and multiplicative AR(1) noise; the trace is then
    scaled to the household's own mean consumption level.
    """
    tb = timebase
    seconds = np.array([tb.seconds_of_day(t) for t in range(tb.n_steps)], dtype=float)
    weekend = np.array(
        [1.0 if tb.day_of_week(t) >= 5 else 0.0 for t in range(tb.n_steps)]
    )

    out = np.empty((n_households, tb.n_steps))
    phi = 0.92
    for h in range(n_households):
        idle = rng.uniform(0.3, 0.5)
        m_amp = rng.uniform(0.3, 0.6)
        m_center = rng.normal(7.5, 0.7) * 3600
        m_width = rng.uniform(0.9, 1.5) * 3600
        e_amp = rng.uniform(0.5, 0.9)
        e_center = rng.normal(18.5, 0.4) * 3600
        e_width = rng.uniform(1.8, 2.6) * 3600
        wk_mult = rng.uniform(1.0, 1.1)

        bumps = m_amp * _bump(seconds, m_center, m_width) + e_amp * _bump(
            seconds, e_center, e_width
        )
        pattern = idle + bumps * (1.0 + (wk_mult - 1.0) * weekend)

        sigma = rng.uniform(0.01, 0.03)
        eps = rng.normal(0.0, sigma, tb.n_steps)
        noise = np.empty(tb.n_steps)
        acc = 0.0
        for t in range(tb.n_steps):
            acc = phi * acc + eps[t]
            noise[t] = acc
        trace = np.maximum(pattern * (1.0 + noise), 0.0)

        target_mean = rng.uniform(0.75, 1.05)
        mean = trace.mean()
        if mean > 0:
            trace *= target_mean / mean
        out[h] = trace
    return out


def build_requests(
    rng: np.random.Generator,
    timebase: Timebase,
    baselines: np.ndarray,
    travel_pool: list[TravelRecord],
    *,
    charging_share: float = DEFAULT_CHARGING_SHARE,
    skip_probability: float = 0.12,
    max_kw_range: tuple[float, float] = (3.0, 8.0),
) -> list[list[ChargingRequest]]:
    """Overnight charging requests per household.

    A travel day d yields a request open from the car's return on day d to
    its departure on day d+1. Energies are drawn from a gamma distribution
    and rescaled so total charging is `charging_share` of overall consumption
    (baseline plus charging). Demands a request window cannot physically
    absorb are clamped down, with a log note.
    """
    if not (0.0 < charging_share < 1.0):
        raise ConfigError(f"charging_share must be in (0, 1), got {charging_share}")
    tb = timebase
    spd = tb.steps_per_day
    n_days = tb.n_steps // spd
    if n_days < 2:
        raise ConfigError("request generation needs at least two full days")
    n_households = baselines.shape[0]

    by_dow: dict[int, list[TravelRecord]] = {d: [] for d in range(7)}
    for rec in travel_pool:
        by_dow[rec.day_of_week].append(rec)
    for dow in range(7):
        if not by_dow[dow]:
            raise ValidationError(f"travel pool has no records for day_of_week={dow}")

    # First pass: windows and rate limits; energies come after global scaling.
    drafts: list[tuple[int, int, int, float]] = []  # household, arrive, depart, max_kw
    for h in range(n_households):
        max_kw = rng.uniform(*max_kw_range)
        for day in range(n_days - 1):
            if rng.random() < skip_probability:
                continue
            dow = tb.day_of_week(day * spd)
            dow_next = tb.day_of_week((day + 1) * spd)
            back = by_dow[dow][rng.integers(len(by_dow[dow]))]
            away = by_dow[dow_next][rng.integers(len(by_dow[dow_next]))]
            arrive = day * spd + math.ceil(back.return_s / tb.step_seconds)
            depart = (day + 1) * spd + math.floor(away.depart_s / tb.step_seconds)
            if depart <= arrive or depart > tb.n_steps:
                continue
            drafts.append((h, arrive, depart, max_kw))

    raw = rng.gamma(shape=2.5, scale=2.0, size=len(drafts))
    base_kwh = baselines.sum() * tb.step_hours
    target_kwh = base_kwh * charging_share / (1.0 - charging_share)
    if raw.sum() > 0:
        raw *= target_kwh / raw.sum()

    requests: list[list[ChargingRequest]] = [[] for _ in range(n_households)]
    clamped = 0
    for (h, arrive, depart, max_kw), kwh in zip(drafts, raw):
        cap = max_kw * (depart - arrive) * tb.step_hours
        if kwh > cap:
            kwh = cap * (1.0 - 1e-9)
            clamped += 1
        if kwh < MIN_REQUEST_KWH:
            continue
        requests[h].append(
            ChargingRequest(
                household_id=f"h{h:03d}",
                t_arrive=arrive,
                t_depart=depart,
                required_energy=float(kwh),
                max_kw=float(max_kw),
            )
        )
    if clamped:
        log.info("clamped %d charging demands to their window capacity", clamped)
    for reqs in requests:
        reqs.sort(key=lambda r: r.t_arrive)
    return requests


def synth_scenario(
    *,
    n_households: int = DEFAULT_HOUSEHOLDS,
    split_days: tuple[int, int, int] = DEFAULT_SPLIT_DAYS,
    step_seconds: int = 900,
    start: datetime | None = None,
    charging_share: float = DEFAULT_CHARGING_SHARE,
    seed: int = 0,
) -> tuple[Scenario, dict[str, tuple[int, int]], list[TravelRecord]]:
    """Full synthetic scenario plus split step-ranges and the travel pool.

    The scenario spans sum(split_days) days; splits are contiguous
    [start_step, end_step) ranges in train, tune, test order.
    """
    if len(split_days) != 3 or any(d < 1 for d in split_days):
        raise ConfigError(f"split_days needs three positive day counts, got {split_days}")
    if n_households < 1:
        raise ConfigError(f"n_households must be >= 1, got {n_households}")
    n_days = sum(split_days)
    if start is None:
        start = datetime(2026, 3, 2)  # a Monday, so splits start week-aligned
    tb = Timebase(start=start, n_steps=n_days * (SECONDS_PER_DAY // step_seconds),
                  step_seconds=step_seconds)

    root = np.random.default_rng(np.random.SeedSequence(seed))
    loads_rng, travel_rng, req_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    del root

    baselines = synth_baselines(loads_rng, tb, n_households)
    pool = build_travel_pool(travel_rng)
    requests = build_requests(
        req_rng, tb, baselines, pool, charging_share=charging_share
    )
    households = tuple(
        Household(
            household_id=f"h{h:03d}",
            baseline_load=baselines[h],
            requests=tuple(requests[h]),
        )
        for h in range(n_households)
    )
    scenario = Scenario(timebase=tb, households=households)

    spd = tb.steps_per_day
    bounds = []
    cursor = 0
    for days in split_days:
        bounds.append((cursor * spd, (cursor + days) * spd))
        cursor += days
    splits = dict(zip(SPLIT_NAMES, bounds))
    return scenario, splits, pool


def charging_share_of(scenario: Scenario) -> float:
    """Realized fraction of overall energy that is charging."""
    base_kwh = scenario.baseline_matrix().sum() * scenario.timebase.step_hours
    charge_kwh = sum(r.required_energy for r in scenario.all_requests())
    total = base_kwh + charge_kwh
    return charge_kwh / total if total > 0 else 0.0


# ---------------------------------------------------------------------------
# Dataset directory layout
# ---------------------------------------------------------------------------


def write_splits_json(
    splits: dict[str, tuple[int, int]], timebase: Timebase, path: str | Path
) -> None:
    doc = {
        "format_version": 1,
        "step_seconds": timebase.step_seconds,
        "splits": {
            name: {"start_step": int(a), "end_step": int(b)} for name, (a, b) in splits.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_splits_json(path: str | Path) -> dict[str, tuple[int, int]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    try:
        return {
            name: (int(rng["start_step"]), int(rng["end_step"]))
            for name, rng in doc["splits"].items()
        }
    except (KeyError, TypeError):
        raise ValidationError(f"{path}: malformed splits manifest") from None


def save_dataset(
    directory: str | Path,
    scenario: Scenario,
    splits: dict[str, tuple[int, int]],
    travels: list[TravelRecord] | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, directory)
    write_splits_json(splits, scenario.timebase, directory / "splits.json")
    if travels is not None:
        write_travels_csv(travels, directory / "travels.csv")


def load_dataset(directory: str | Path) -> tuple[Scenario, dict[str, tuple[int, int]]]:
    directory = Path(directory)
    scenario = load_scenario(directory)
    splits_path = directory / "splits.json"
    if splits_path.exists():
        splits = read_splits_json(splits_path)
    else:
        splits = {"train": (0, scenario.timebase.n_steps)}
    for name, (a, b) in splits.items():
        if not (0 <= a < b <= scenario.timebase.n_steps):
            raise ValidationError(f"split {name!r} range [{a},{b}) outside scenario")
    return scenario, splits


def split_scenario(
    scenario: Scenario, splits: dict[str, tuple[int, int]], name: str
) -> Scenario:
    if name not in splits:
        raise ConfigError(f"no split named {name!r}; have {sorted(splits)}")
    a, b = splits[name]
    return slice_scenario(scenario, a, b)
