"""Controller training: CMA-ES, windowed numerical gradient descent, and
output-smoothing calibration.

Both trainers treat the simulator as a black box mapping a flat parameter
vector to the post-warmup standard deviation of total grid load. CMA-ES is
self-contained here; the gradient trainer estimates descent directions by
forward differences on short simulation windows and validates candidate
steps on the full training scenario.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .controllers import (
    KIND_ESN,
    ControllerParams,
    ReservoirWeights,
    build_reservoir,
    make_controller,
)
from .domain import Scenario
from .errors import ConfigError, ParameterError
from .features import feature_count
from .simulator import SimKernel, default_warmup, objective_std

STEP_SIZE_GRID = (0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5)
SMOOTHING_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.0)

DEFAULT_ITERATIONS = 250
DEFAULT_POPSIZE = 16
DEFAULT_SIGMA0 = 0.3
DEFAULT_EPSILON = 1e-4
DEFAULT_WINDOW_HOURS = 72
DEFAULT_OBJECTIVE_HOURS = 48


@dataclass
class OptResult:
    """Outcome of one optimization run."""

    x: np.ndarray
    fitness: float
    history: list[float]  # best objective so far, index 0 = starting point
    evaluations: int
    iterations: int


# ---------------------------------------------------------------------------
# Objective evaluation, optionally fanned out over worker processes
# ---------------------------------------------------------------------------

_WORKER_CTX: tuple[SimKernel, ControllerParams, ReservoirWeights | None] | None = None


def _worker_init(scenario: Scenario, template: ControllerParams,
                 reservoir: ReservoirWeights | None) -> None:
    global _WORKER_CTX
    _WORKER_CTX = (SimKernel(scenario), template, reservoir)


def _worker_eval(task: tuple[np.ndarray, int, int | None, int | None]) -> float:
    assert _WORKER_CTX is not None
    kernel, template, reservoir = _WORKER_CTX
    theta, start, end, warmup = task
    controller = make_controller(template.with_theta(theta), reservoir=reservoir)
    result = kernel.run(controller, start_step=start, end_step=end, warmup_steps=warmup)
    return objective_std(result)


class Evaluator:
    """Objective for one scenario and controller family.

    Callable on a single parameter vector; `map_full` and `map_window` batch
    many vectors, across processes when `workers` > 1. Use as a context
    manager so the pool is torn down.
    """

    def __init__(self, scenario: Scenario, template: ControllerParams, *, workers: int = 1):
        self.scenario = scenario
        self.template = template
        self.reservoir = None
        if template.kind == KIND_ESN:
            self.reservoir = build_reservoir(
                feature_count(template.input_mode),
                template.reservoir_size,
                template.reservoir_seed,
            )
        self.kernel = SimKernel(scenario)
        self.warmup = default_warmup(scenario.timebase)
        self._pool: ProcessPoolExecutor | None = None
        if workers > 1:
            self._pool = ProcessPoolExecutor(
                max_workers=workers,
                initializer=_worker_init,
                initargs=(scenario, template, self.reservoir),
            )

    def __enter__(self) -> "Evaluator":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _eval_local(self, task: tuple[np.ndarray, int, int | None, int | None]) -> float:
        theta, start, end, warmup = task
        controller = make_controller(self.template.with_theta(theta), reservoir=self.reservoir)
        result = self.kernel.run(controller, start_step=start, end_step=end, warmup_steps=warmup)
        return objective_std(result)

    def _map(self, tasks: list[tuple[np.ndarray, int, int | None, int | None]]) -> list[float]:
        if self._pool is None:
            return [self._eval_local(t) for t in tasks]
        return list(self._pool.map(_worker_eval, tasks))

    def __call__(self, theta: np.ndarray) -> float:
        return self._eval_local((np.asarray(theta, dtype=float), 0, None, self.warmup))

    def map_full(self, thetas: Sequence[np.ndarray]) -> list[float]:
        return self._map([(np.asarray(t, dtype=float), 0, None, self.warmup) for t in thetas])

    def map_window(
        self, thetas: Sequence[np.ndarray], start: int, window_steps: int, objective_steps: int
    ) -> list[float]:
        warmup = window_steps - objective_steps
        return self._map(
            [(np.asarray(t, dtype=float), start, start + window_steps, warmup) for t in thetas]
        )


# ---------------------------------------------------------------------------
# CMA-ES
# ---------------------------------------------------------------------------


class CmaEs:
    """Covariance matrix adaptation evolution strategy, ask/tell style.

    Weighted recombination of the top half of each generation, cumulative
    step-size control, and rank-one plus rank-mu covariance updates. The
    covariance eigendecomposition is refreshed every generation, which is
    cheap at the dimensionalities used here.
    """

    def __init__(self, x0: np.ndarray, sigma0: float, *, popsize: int | None = None,
                 seed: int | None = None):
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim != 1 or x0.size < 1:
            raise ConfigError("x0 must be a non-empty 1-d vector")
        if sigma0 <= 0:
            raise ConfigError(f"sigma0 must be > 0, got {sigma0}")
        n = x0.size
        self.n = n
        self.lam = popsize if popsize is not None else 4 + int(3 * math.log(n))
        if self.lam < 2:
            raise ConfigError(f"population size must be >= 2, got {self.lam}")
        mu = self.lam // 2
        w = np.log((self.lam + 1) / 2) - np.log(np.arange(1, mu + 1))
        self.weights = w / w.sum()
        self.mu = mu
        self.mueff = 1.0 / np.sum(self.weights**2)

        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(
            1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff)
        )
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

        self.rng = np.random.default_rng(seed)
        self.xmean = x0.copy()
        self.sigma = float(sigma0)
        self.cov = np.eye(n)
        self.path_c = np.zeros(n)
        self.path_s = np.zeros(n)
        self.generation = 0
        self.best_x = x0.copy()
        self.best_f = math.inf
        self._pending: np.ndarray | None = None

    def ask(self) -> np.ndarray:
        """Sample a (popsize, n) batch of candidate parameter vectors."""
        cov = (self.cov + self.cov.T) / 2.0
        eigvals, basis = np.linalg.eigh(cov)
        floor = max(eigvals.max(), 0.0) * 1e-14
        eigvals = np.clip(eigvals, max(floor, 1e-300), None)
        self._scale = np.sqrt(eigvals)
        self._basis = basis
        z = self.rng.standard_normal((self.lam, self.n))
        self._steps = (z * self._scale) @ basis.T
        self._pending = self.xmean + self.sigma * self._steps
        return self._pending

    def tell(self, candidates: np.ndarray, fitnesses: Sequence[float]) -> None:
        if self._pending is None or candidates.shape != (self.lam, self.n):
            raise ConfigError("tell() must follow ask() with the same candidate batch")
        fs = np.asarray(fitnesses, dtype=float)
        if fs.shape != (self.lam,):
            raise ConfigError(f"expected {self.lam} fitness values, got {fs.shape}")
        fs = np.where(np.isfinite(fs), fs, math.inf)

        order = np.argsort(fs, kind="stable")
        if fs[order[0]] < self.best_f:
            self.best_f = float(fs[order[0]])
            self.best_x = candidates[order[0]].copy()

        selected = self._steps[order[: self.mu]]
        mean_step = self.weights @ selected
        self.xmean = self.xmean + self.sigma * mean_step

        # Whitened mean step keeps the step-size path comparable across
        # covariance shapes.
        whitened = self._basis @ ((self._basis.T @ mean_step) / self._scale)
        cs, cc = self.cs, self.cc
        self.path_s = (1 - cs) * self.path_s + math.sqrt(
            cs * (2 - cs) * self.mueff
        ) * whitened
        self.generation += 1
        ps_norm = float(np.linalg.norm(self.path_s))
        hsig = ps_norm / math.sqrt(
            1 - (1 - cs) ** (2 * self.generation)
        ) / self.chi_n < 1.4 + 2 / (self.n + 1)
        self.path_c = (1 - cc) * self.path_c + (
            math.sqrt(cc * (2 - cc) * self.mueff) * mean_step if hsig else 0.0
        )

        c1a = self.c1 * (1 - (1 - float(hsig) ** 2) * cc * (2 - cc))
        rank_mu = (self.weights[:, None] * selected).T @ selected
        self.cov = (
            (1 - c1a - self.cmu) * self.cov
            + self.c1 * np.outer(self.path_c, self.path_c)
            + self.cmu * rank_mu
        )
        self.sigma *= math.exp(min(1.0, (cs / self.damps) * (ps_norm / self.chi_n - 1)))
        self._pending = None


def cmaes_minimize(
    objective: Callable[[np.ndarray], float],
    x0: np.ndarray,
    *,
    sigma0: float = DEFAULT_SIGMA0,
    iterations: int = DEFAULT_ITERATIONS,
    popsize: int = DEFAULT_POPSIZE,
    seed: int | None = None,
    map_batch: Callable[[list[np.ndarray]], list[float]] | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> OptResult:
    """Run CMA-ES for a fixed number of generations, keeping the best ever.

    The starting point is evaluated first so a run can never return something
    worse than what it was given.
    """
    x0 = np.asarray(x0, dtype=float)
    batch = map_batch if map_batch is not None else lambda xs: [objective(x) for x in xs]
    es = CmaEs(x0, sigma0, popsize=popsize, seed=seed)
    f0 = float(batch([x0])[0])
    best_x, best_f = x0.copy(), f0 if math.isfinite(f0) else math.inf
    history = [best_f]
    evaluations = 1
    for it in range(iterations):
        xs = es.ask()
        fs = batch(list(xs))
        es.tell(xs, fs)
        evaluations += es.lam
        if es.best_f < best_f:
            best_f = es.best_f
            best_x = es.best_x.copy()
        history.append(best_f)
        if log_fn is not None:
            log_fn(
                {
                    "iteration": it + 1,
                    "best_objective": best_f,
                    "sigma": es.sigma,
                    "evaluations": evaluations,
                }
            )
    return OptResult(
        x=best_x, fitness=best_f, history=history, evaluations=evaluations,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# Windowed numerical gradient descent
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f_batch: Callable[[list[np.ndarray]], list[float]],
    x: np.ndarray,
    epsilon: float,
) -> tuple[np.ndarray, float]:
    """Forward-difference gradient; returns (gradient, f(x))."""
    points = [x] + [_perturb(x, i, epsilon) for i in range(x.size)]
    values = np.asarray(f_batch(points), dtype=float)
    return (values[1:] - values[0]) / epsilon, float(values[0])


def _perturb(x: np.ndarray, i: int, epsilon: float) -> np.ndarray:
    out = x.copy()
    out[i] += epsilon
    return out


def minimize_numgrad(
    eval_full: Callable[[list[np.ndarray]], list[float]],
    make_window_eval: Callable[[], Callable[[list[np.ndarray]], list[float]]],
    x0: np.ndarray,
    *,
    iterations: int = DEFAULT_ITERATIONS,
    epsilon: float = DEFAULT_EPSILON,
    step_sizes: Sequence[float] = STEP_SIZE_GRID,
    log_fn: Callable[[dict], None] | None = None,
) -> OptResult:
    """Gradient descent with per-iteration step-size probing.

    Each iteration estimates a gradient on a freshly drawn evaluation window,
    tries every step size on the full objective, takes the best one if it
    improves, and otherwise stays put. Rejected steps still count as an
    iteration; progress is monotone by construction.
    """
    x = np.asarray(x0, dtype=float).copy()
    f_cur = float(eval_full([x])[0])
    history = [f_cur]
    evaluations = 1
    for it in range(iterations):
        window_eval = make_window_eval()
        grad, _ = finite_difference_gradient(window_eval, x, epsilon)
        evaluations += x.size + 1
        chosen = None
        if np.any(grad != 0.0) and np.all(np.isfinite(grad)):
            candidates = [x - lam * grad for lam in step_sizes]
            fs = np.asarray(eval_full(candidates), dtype=float)
            evaluations += len(candidates)
            k = int(np.argmin(fs))
            if fs[k] < f_cur:
                x = candidates[k]
                f_cur = float(fs[k])
                chosen = step_sizes[k]
        history.append(f_cur)
        if log_fn is not None:
            log_fn(
                {
                    "iteration": it + 1,
                    "best_objective": f_cur,
                    "step_size": chosen if chosen is not None else 0.0,
                    "evaluations": evaluations,
                }
            )
    return OptResult(x=x, fitness=f_cur, history=history, evaluations=evaluations,
                     iterations=iterations)


# ---------------------------------------------------------------------------
# Scenario-level training entry points
# ---------------------------------------------------------------------------


def train_cma(
    scenario: Scenario,
    params0: ControllerParams,
    *,
    iterations: int = DEFAULT_ITERATIONS,
    popsize: int = DEFAULT_POPSIZE,
    sigma0: float = DEFAULT_SIGMA0,
    seed: int | None = None,
    workers: int = 1,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[ControllerParams, OptResult]:
    with Evaluator(scenario, params0, workers=workers) as ev:
        result = cmaes_minimize(
            ev,
            params0.theta,
            sigma0=sigma0,
            iterations=iterations,
            popsize=popsize,
            seed=seed,
            map_batch=ev.map_full,
            log_fn=log_fn,
        )
    trained = replace(params0.with_theta(result.x), trained_with="cma")
    return trained, result


def window_steps_for(scenario: Scenario, window_hours: float, objective_hours: float) -> tuple[int, int]:
    tb = scenario.timebase
    window = int(round(window_hours * 3600 / tb.step_seconds))
    objective = int(round(objective_hours * 3600 / tb.step_seconds))
    if objective < 1 or window <= objective:
        raise ParameterError(
            f"evaluation window ({window_hours}h) must exceed its scored part "
            f"({objective_hours}h)"
        )
    if window > tb.n_steps:
        raise ParameterError(
            f"evaluation window of {window} steps does not fit a {tb.n_steps}-step scenario"
        )
    return window, objective


def train_numgrad(
    scenario: Scenario,
    params0: ControllerParams,
    *,
    iterations: int = DEFAULT_ITERATIONS,
    epsilon: float = DEFAULT_EPSILON,
    window_hours: float = DEFAULT_WINDOW_HOURS,
    objective_hours: float = DEFAULT_OBJECTIVE_HOURS,
    step_sizes: Sequence[float] = STEP_SIZE_GRID,
    seed: int | None = None,
    workers: int = 1,
    log_fn: Callable[[dict], None] | None = None,
) -> tuple[ControllerParams, OptResult]:
    window, objective = window_steps_for(scenario, window_hours, objective_hours)
    rng = np.random.default_rng(seed)
    tb = scenario.timebase
    with Evaluator(scenario, params0, workers=workers) as ev:

        def make_window_eval() -> Callable[[list[np.ndarray]], list[float]]:
            start = int(rng.integers(0, tb.n_steps - window + 1))
            return lambda thetas: ev.map_window(thetas, start, window, objective)

        result = minimize_numgrad(
            ev.map_full,
            make_window_eval,
            params0.theta,
            iterations=iterations,
            epsilon=epsilon,
            step_sizes=step_sizes,
            log_fn=log_fn,
        )
    trained = replace(params0.with_theta(result.x), trained_with="numgrad")
    return trained, result


def tune_smoothing(
    scenario: Scenario,
    params: ControllerParams,
    *,
    grid: Sequence[float] = SMOOTHING_GRID,
) -> tuple[ControllerParams, list[tuple[float, float]]]:
    """Pick the output smoothing weight by full simulations on `scenario`.

    Returns the re-tuned parameters and the (smoothing, objective) table.
    Ties go to the smaller weight.
    """
    kernel = SimKernel(scenario)
    reservoir = None
    if params.kind == KIND_ESN:
        reservoir = build_reservoir(
            feature_count(params.input_mode), params.reservoir_size, params.reservoir_seed
        )
    table = []
    for beta in grid:
        candidate = replace(params, smoothing=float(beta))
        controller = make_controller(candidate, reservoir=reservoir)
        table.append((float(beta), objective_std(kernel.run(controller))))
    best_beta = min(table, key=lambda row: (row[1], row[0]))[0]
    return replace(params, smoothing=best_beta), table
