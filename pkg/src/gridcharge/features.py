"""Controller input features.

Each step, every household controller sees a fixed-order feature vector built
from the wall clock, its pending charging request, and recent load history.
Mode ``"h"`` uses household-local load history only (12 features); mode ``"a"``
appends the same five history statistics computed on the total grid load
(17 features).

Layout (household mode, columns 0-11):
  0 time_cos             cosine of the time-of-day angle
  1 time_sin             sine of the time-of-day angle
  2 weekday_flag         1.0 Monday-Friday, 0.0 on weekends
  3 window_fraction_left remaining steps / total steps of the open request
  4 energy_fraction_left remaining energy / requested energy
  5 min_rate_ratio       deadline-keeping flat rate / rate limit
  6 const_rate_ratio     tightest constant rate over the window / rate limit
  7-11                   household load history block (see history_block)
Grid mode appends columns 12-16: the same history block on total grid load.
Columns 3-6 are zero while no request is open.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

INPUT_HOUSEHOLD = "h"
INPUT_ALL = "a"
INPUT_MODES = (INPUT_HOUSEHOLD, INPUT_ALL)

FEATURE_NAMES_HOUSEHOLD = (
    "time_cos",
    "time_sin",
    "weekday_flag",
    "window_fraction_left",
    "energy_fraction_left",
    "min_rate_ratio",
    "const_rate_ratio",
    "load_vs_daily_mean",
    "load_delta_step",
    "load_delta_hour",
    "load_delta_3h",
    "load_range_position",
)
FEATURE_NAMES_GRID = (
    "grid_vs_daily_mean",
    "grid_delta_step",
    "grid_delta_hour",
    "grid_delta_3h",
    "grid_range_position",
)


def feature_count(mode: str) -> int:
    if mode == INPUT_HOUSEHOLD:
        return len(FEATURE_NAMES_HOUSEHOLD)
    if mode == INPUT_ALL:
        return len(FEATURE_NAMES_HOUSEHOLD) + len(FEATURE_NAMES_GRID)
    raise ConfigError(f"unknown input mode {mode!r}, expected one of {INPUT_MODES}")


def encode_time_of_day(seconds_of_day: float) -> tuple[float, float]:
    """Map a time of day onto the unit circle: (cos, sin) of its day angle."""
    angle = 2.0 * math.pi * seconds_of_day / 86400.0
    return math.cos(angle), math.sin(angle)


class RollingBuffer:
    """Fixed-capacity ring buffer over row-parallel series.

    Holds the last `capacity` pushed values for each of `n_rows` independent
    series. Lag queries clamp to the oldest available entry while the buffer
    is still filling, so early-run features degrade gracefully instead of
    reading uninitialized memory.
    """

    def __init__(self, n_rows: int, capacity: int):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.n_rows = n_rows
        self.capacity = capacity
        self.values = np.zeros((n_rows, capacity))
        self.count = 0
        self._pos = 0  # next write slot

    def push(self, column: np.ndarray) -> None:
        self.values[:, self._pos] = column
        self._pos = (self._pos + 1) % self.capacity
        if self.count < self.capacity:
            self.count += 1

    def current(self) -> np.ndarray:
        if self.count == 0:
            raise ConfigError("buffer read before first push")
        return self.values[:, (self._pos - 1) % self.capacity]

    def lagged(self, lag: int) -> np.ndarray:
        """Value `lag` pushes ago; clamped to the oldest entry if short."""
        if self.count == 0:
            raise ConfigError("buffer read before first push")
        if lag >= self.count:
            lag = self.count - 1
        return self.values[:, (self._pos - 1 - lag) % self.capacity]

    def window(self) -> np.ndarray:
        """All valid entries, shape (n_rows, count); order is not meaningful."""
        if self.count < self.capacity:
            return self.values[:, : self.count]
        return self.values


def history_block(
    buffer: RollingBuffer, steps_per_hour: int, out: np.ndarray | None = None
) -> np.ndarray:
    """Five summary statistics of recent load per row, shape (n_rows, 5).

    Columns: ratio of the current value to the window mean (1.0 when the mean
    is zero), change over one step, over one hour, over three hours, and the
    current value's position inside the window's [min, max] range (0.5 when
    the range is degenerate). Runs in the per-step hot path, hence the
    preallocated `out` and the spelled-out ufunc calls.
    """
    if out is None:
        out = np.empty((buffer.n_rows, 5))
    cur = buffer.current()
    win = buffer.window()

    mean = win.mean(axis=1)
    out[:, 0] = 1.0
    np.divide(cur, mean, out=out[:, 0], where=mean > 0)

    np.subtract(cur, buffer.lagged(1), out=out[:, 1])
    np.subtract(cur, buffer.lagged(steps_per_hour), out=out[:, 2])
    np.subtract(cur, buffer.lagged(3 * steps_per_hour), out=out[:, 3])

    lo = win.min(axis=1)
    hi = win.max(axis=1)
    span = hi - lo
    out[:, 4] = 0.5
    np.divide(cur - lo, span, out=out[:, 4], where=span > 0)
    return out


def constant_rate_kw(
    remaining_kwh: np.ndarray, remaining_steps: np.ndarray, step_hours: float
) -> np.ndarray:
    """Charging rate that spreads the remaining energy evenly over the window."""
    steps = np.maximum(remaining_steps, 1)
    return remaining_kwh / (steps * step_hours)
