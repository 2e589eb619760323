"""Charging controllers: trainable policies, rule-based baselines, output shaping.

A controller turns per-step inputs into a charging speed for each household.
Two trainable families share the same contract: a small feedforward network
and an echo state network whose recurrent part is fixed at build time and
whose linear readout is trained. Both emit a rate in [0, 1] that the output
stage converts to kW through a low-pass filter with a deadline floor.

Rule-based baselines (charge at full speed, charge as late as possible,
charge at constant speed) skip features and filtering entirely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParameterError
from .features import INPUT_MODES, feature_count

KIND_NN = "nn"
KIND_ESN = "esn"
KIND_MAX = "max_charge"
KIND_MIN = "min_charge"
KIND_CONST = "const_charge"
TRAINABLE_KINDS = (KIND_NN, KIND_ESN)
BASELINE_KINDS = (KIND_MAX, KIND_MIN, KIND_CONST)

PARAMS_FORMAT_VERSION = 1

INIT_SCALE = 0.1


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp for large negative inputs.
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# Parameter container and (de)serialization
# ---------------------------------------------------------------------------


@dataclass
class ControllerParams:
    """Everything needed to reconstruct a trainable controller.

    `theta` is the flat trained vector. For the echo state network the fixed
    recurrent weights are not stored; they are regenerated deterministically
    from `reservoir_seed`.
    """

    kind: str
    input_mode: str
    theta: np.ndarray
    smoothing: float = 0.0
    hidden_size: int = 5
    reservoir_size: int = 100
    leak_rate: float = 0.1
    reservoir_seed: int = 0
    name: str | None = None
    trained_with: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in TRAINABLE_KINDS:
            raise ParameterError(f"unknown trainable controller kind {self.kind!r}")
        if self.input_mode not in INPUT_MODES:
            raise ParameterError(f"unknown input mode {self.input_mode!r}")
        if not (0.0 <= self.smoothing <= 1.0):
            raise ParameterError(f"smoothing must be in [0, 1], got {self.smoothing}")
        if not (0.0 < self.leak_rate <= 1.0):
            raise ParameterError(f"leak_rate must be in (0, 1], got {self.leak_rate}")
        self.theta = np.asarray(self.theta, dtype=float)
        expected = theta_size(self)
        if self.theta.shape != (expected,):
            raise ParameterError(
                f"{self.kind} controller with input mode {self.input_mode!r} needs "
                f"{expected} parameters, got {self.theta.shape}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ParameterError("controller parameters contain non-finite values")

    def with_theta(self, theta: np.ndarray) -> "ControllerParams":
        return replace(self, theta=np.asarray(theta, dtype=float))


def theta_size_for(
    kind: str, input_mode: str, *, hidden_size: int = 5, reservoir_size: int = 100
) -> int:
    d = feature_count(input_mode)
    if kind == KIND_NN:
        return hidden_size * d + hidden_size + hidden_size + 1
    return reservoir_size + d + 1


def theta_size(params: ControllerParams) -> int:
    return theta_size_for(
        params.kind,
        params.input_mode,
        hidden_size=params.hidden_size,
        reservoir_size=params.reservoir_size,
    )


def init_params(
    kind: str,
    input_mode: str,
    rng: np.random.Generator,
    *,
    smoothing: float = 0.0,
    hidden_size: int = 5,
    reservoir_size: int = 100,
    leak_rate: float = 0.1,
    reservoir_seed: int | None = None,
) -> ControllerParams:
    """Fresh controller parameters with small gaussian weights."""
    if kind not in TRAINABLE_KINDS:
        raise ConfigError(f"cannot initialize parameters for kind {kind!r}")
    if reservoir_seed is None:
        reservoir_seed = int(rng.integers(0, 2**31 - 1))
    size = theta_size_for(kind, input_mode, hidden_size=hidden_size, reservoir_size=reservoir_size)
    return ControllerParams(
        kind=kind,
        input_mode=input_mode,
        theta=INIT_SCALE * rng.standard_normal(size),
        smoothing=smoothing,
        hidden_size=hidden_size,
        reservoir_size=reservoir_size,
        leak_rate=leak_rate,
        reservoir_seed=reservoir_seed,
    )


def save_params(params: ControllerParams, path: str | Path) -> None:
    doc: dict = {
        "format_version": PARAMS_FORMAT_VERSION,
        "kind": params.kind,
        "input_mode": params.input_mode,
        "smoothing": params.smoothing,
        "name": params.name,
        "trained_with": params.trained_with,
        "theta": [float(v) for v in params.theta],
    }
    if params.kind == KIND_NN:
        doc["nn"] = {"hidden_size": params.hidden_size}
    else:
        doc["esn"] = {
            "reservoir_size": params.reservoir_size,
            "leak_rate": params.leak_rate,
            "seed": params.reservoir_seed,
        }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_params(path: str | Path) -> ControllerParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ParameterError(f"{path}: expected a JSON object")
    version = doc.get("format_version")
    if version != PARAMS_FORMAT_VERSION:
        raise ParameterError(
            f"{path}: unsupported format_version {version!r}, expected {PARAMS_FORMAT_VERSION}"
        )
    try:
        kind = doc["kind"]
        kwargs = dict(
            kind=kind,
            input_mode=doc["input_mode"],
            smoothing=float(doc.get("smoothing", 0.0)),
            theta=np.asarray(doc["theta"], dtype=float),
            name=doc.get("name"),
            trained_with=doc.get("trained_with"),
        )
        if kind == KIND_NN:
            kwargs["hidden_size"] = int(doc.get("nn", {}).get("hidden_size", 5))
        elif kind == KIND_ESN:
            esn = doc.get("esn", {})
            kwargs["reservoir_size"] = int(esn.get("reservoir_size", 100))
            kwargs["leak_rate"] = float(esn.get("leak_rate", 0.1))
            kwargs["reservoir_seed"] = int(esn["seed"])
    except KeyError as exc:
        raise ParameterError(f"{path}: missing field {exc.args[0]!r}") from None
    return ControllerParams(**kwargs)


# ---------------------------------------------------------------------------
# Echo state network fixed weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReservoirWeights:
    w_in: np.ndarray       # (size, d_in)
    b_in: np.ndarray       # (size,)
    w_recurrent: np.ndarray  # (size, size), unit spectral radius
    seed_used: int


def build_reservoir(
    d_in: int,
    size: int,
    seed: int,
    *,
    input_scale: float = 0.5,
    zero_fraction_num: int = 9,
    zero_fraction_den: int = 10,
) -> ReservoirWeights:
    """Deterministic fixed weights for an echo state network.

    Input weights and biases are uniform in [-input_scale, input_scale]. The
    recurrent matrix starts uniform in [-0.5, 0.5], has exactly 90% of its
    entries zeroed, and is rescaled to unit spectral radius. The rare draw
    whose spectral radius vanishes is retried with the next seed; the seed
    that actually produced the weights is reported so reloads reproduce them.
    """
    n_total = size * size
    n_zero = (zero_fraction_num * n_total) // zero_fraction_den
    for attempt in range(32):
        used = seed + attempt
        rng = np.random.default_rng(used)
        w_in = rng.uniform(-input_scale, input_scale, (size, d_in))
        b_in = rng.uniform(-input_scale, input_scale, size)
        w = rng.uniform(-0.5, 0.5, (size, size))
        w.flat[rng.permutation(n_total)[:n_zero]] = 0.0
        radius = float(np.max(np.abs(np.linalg.eigvals(w))))
        if radius > 1e-12:
            w /= radius
            for arr in (w_in, b_in, w):
                arr.setflags(write=False)
            return ReservoirWeights(w_in=w_in, b_in=b_in, w_recurrent=w, seed_used=used)
    raise ParameterError(f"could not build a usable reservoir from seed {seed}")


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------


class LearnedController:
    """Trainable policy plus the output low-pass stage, stepped in lockstep
    across all households.

    The policy is evaluated every step so internal state (reservoir, filter
    memory) stays warm; households without an active request have their
    output forced to zero and their filter memory cleared.
    """

    needs_features = True

    def __init__(self, params: ControllerParams, reservoir: ReservoirWeights | None = None):
        self.params = params
        self.d_in = feature_count(params.input_mode)
        if params.kind == KIND_ESN:
            if reservoir is None:
                reservoir = build_reservoir(self.d_in, params.reservoir_size, params.reservoir_seed)
            self.reservoir = reservoir
            self.w_out = params.theta[: params.reservoir_size + self.d_in]
            self.b_out = float(params.theta[-1])
        else:
            h = params.hidden_size
            d = self.d_in
            t = params.theta
            self.w1 = t[: h * d].reshape(h, d)
            self.b1 = t[h * d : h * d + h]
            self.w2 = t[h * d + h : h * d + h + h]
            self.b2 = float(t[-1])
        self._state: np.ndarray | None = None
        self._last_output: np.ndarray | None = None

    def reset(self, n_households: int) -> None:
        self._last_output = np.zeros(n_households)
        if self.params.kind == KIND_ESN:
            self._state = np.zeros((n_households, self.params.reservoir_size))

    def rates(self, x: np.ndarray) -> np.ndarray:
        """Raw policy output in [0, 1] for a (households, d_in) feature matrix."""
        if self.params.kind == KIND_NN:
            hidden = relu(x @ self.w1.T + self.b1)
            return sigmoid(hidden @ self.w2 + self.b2)
        alpha = self.params.leak_rate
        res = self.reservoir
        pre = self._state @ res.w_recurrent.T + x @ res.w_in.T + res.b_in
        self._state = (1.0 - alpha) * self._state + alpha * np.tanh(pre)
        readout = np.concatenate([self._state, x], axis=1)
        return sigmoid(readout @ self.w_out + self.b_out)

    def step(
        self,
        x: np.ndarray,
        active: np.ndarray,
        remaining_kwh: np.ndarray,
        remaining_steps: np.ndarray,
        total_steps: np.ndarray,
        required_kwh: np.ndarray,
        max_kw: np.ndarray,
        step_hours: float,
    ) -> np.ndarray:
        if self._last_output is None:
            raise ConfigError("controller used before reset()")
        r = self.rates(x)
        # Feasibility floor: the just-in-time rate, i.e. what must be charged
        # NOW so that full-speed charging for the rest of the window can still
        # finish the request. Zero while there is slack, so the policy is free
        # to defer charging entirely.
        steps = np.maximum(remaining_steps, 1.0)
        slack_kwh = max_kw * (steps - 1.0) * step_hours
        floor = np.minimum(
            np.maximum(remaining_kwh - slack_kwh, 0.0) / step_hours, max_kw
        )
        beta = self.params.smoothing
        blended = beta * self._last_output + (1.0 - beta) * max_kw * r
        out = np.minimum(np.maximum(blended, floor), max_kw)
        out *= active
        self._last_output = out
        return out


class RuleController:
    """Fixed charging rules that need no features and carry no state."""

    needs_features = False

    def __init__(self, kind: str):
        if kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown baseline controller {kind!r}")
        self.kind = kind

    def reset(self, n_households: int) -> None:
        pass

    def step(
        self,
        x: np.ndarray | None,
        active: np.ndarray,
        remaining_kwh: np.ndarray,
        remaining_steps: np.ndarray,
        total_steps: np.ndarray,
        required_kwh: np.ndarray,
        max_kw: np.ndarray,
        step_hours: float,
    ) -> np.ndarray:
        steps = np.maximum(remaining_steps, 1.0)
        if self.kind == KIND_MAX:
            # Front-load: run at the rate limit until the request is done.
            out = np.minimum(max_kw, remaining_kwh / step_hours)
        elif self.kind == KIND_MIN:
            # Back-load: charge only what cannot be deferred to later steps.
            deferrable = max_kw * (steps - 1.0) * step_hours
            out = np.minimum(
                np.maximum((remaining_kwh - deferrable) / step_hours, 0.0), max_kw
            )
        else:
            # Flat rate sized so the full demand lands exactly at departure.
            total = np.maximum(total_steps, 1.0)
            out = np.minimum(required_kwh / (total * step_hours), max_kw)
        out = out * active
        return out


def make_controller(
    spec: str | ControllerParams, reservoir: ReservoirWeights | None = None
) -> LearnedController | RuleController:
    """Controller from a baseline kind name or trained parameters."""
    if isinstance(spec, ControllerParams):
        return LearnedController(spec, reservoir=reservoir)
    if spec in BASELINE_KINDS:
        return RuleController(spec)
    raise ConfigError(
        f"unknown controller {spec!r}: expected one of {BASELINE_KINDS} or trained parameters"
    )
