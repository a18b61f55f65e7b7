"""Discrete-time closed-loop simulator.

Plant: the identified voice-coil actuator
G(s) = 3.28 exp(-0.011 s) / (0.00064 s^3 + 0.634 s^2 + 80 s),
discretised with a zero-order hold and an integer-sample input delay.
Controller: parallel-form PID whose derivative channel is fed by any
differentiator from `adf_lab.differentiators`.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy import signal, stats

from adf_lab.adf import Sample
from adf_lab.differentiators import Differentiator

logger = logging.getLogger(__name__)

NOISE_KINDS = ("uniform", "gaussian", "none")
REFERENCE_KINDS = ("step", "slope", "ramp", "sine", "chirp")

# Inductive sensor repeat accuracy.
SENSOR_NOISE_BOUND = 12e-6


class SimulationError(ValueError):
    """Raised for invalid simulation models or inputs."""


@dataclass(frozen=True)
class PlantModel:
    """
    Third-order-plus-delay plant km * exp(-tau s) / (m s^3 + nu s^2 + b0 s).

    The printed cubic is used verbatim; it does not factor exactly as
    s (m s + nu) (mu s + 1) with the quoted mu = 0.0012.

    load_offset is a constant input-side load in volts (gravity), subtracted
    from the applied voltage. clamp_position stops motion at the mechanical
    range [x_min, x_max].
    """

    km: float = 3.28
    m: float = 0.00064
    nu: float = 0.634
    b0: float = 80.0
    tau: float = 0.011
    ts: float = 1.0 / 2000.0
    load_offset: float = 0.0
    clamp_position: bool = False
    x_min: float = 0.0
    x_max: float = 0.018

    def __post_init__(self):
        for name in ("m", "nu", "b0"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.ts > 0:
            raise SimulationError(f"ts must be > 0, got {self.ts}")
        if self.tau < 0:
            raise SimulationError(f"tau must be >= 0, got {self.tau}")
        steps = self.tau / self.ts
        if not math.isclose(steps, round(steps), rel_tol=0.0, abs_tol=1e-6):
            raise SimulationError(
                f"delay {self.tau} s is not a whole number of {self.ts} s samples"
            )
        if not self.x_min < self.x_max:
            raise SimulationError("x_min must be below x_max")

    @property
    def delay_samples(self) -> int:
        return int(round(self.tau / self.ts))

    def state_space(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Continuous model in phase variables (position, velocity, acceleration)."""
        a = np.array(
            [
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, -self.b0 / self.m, -self.nu / self.m],
            ]
        )
        b = np.array([[0.0], [0.0], [self.km / self.m]])
        c = np.array([[1.0, 0.0, 0.0]])
        d = np.array([[0.0]])
        return a, b, c, d


class Plant:
    """PlantState: ZOH-discretised states plus the input delay line."""

    def __init__(self, model: PlantModel):
        self.model = model
        ad, bd, _, _, _ = signal.cont2discrete(model.state_space(), model.ts, method="zoh")
        self._ad = np.asarray(ad)
        self._bd = np.asarray(bd)[:, 0]
        self._state = np.zeros(3)
        n = model.delay_samples
        # The delay line starts holding the load, so the plant begins at rest.
        self._delay: Optional[deque[float]] = deque([model.load_offset] * n, maxlen=n) if n else None

    @property
    def position(self) -> float:
        return float(self._state[0])

    @property
    def velocity(self) -> float:
        return float(self._state[1])

    def step(self, u: float) -> float:
        """
        Apply voltage u for one sample period and return the new position.

        Raises:
            SimulationError: If u is not finite.
        """
        if not math.isfinite(u):
            raise SimulationError(f"non-finite plant input {u!r}")
        if self._delay is not None:
            u_applied = self._delay[0]
            self._delay.append(u)
        else:
            u_applied = u
        self._state = self._ad @ self._state + self._bd * (u_applied - self.model.load_offset)
        if self.model.clamp_position:
            self._clamp()
        return self.position

    def _clamp(self) -> None:
        x, v, _ = self._state
        if x < self.model.x_min:
            self._state[0] = self.model.x_min
            if v < 0:
                self._state[1:] = 0.0
        elif x > self.model.x_max:
            self._state[0] = self.model.x_max
            if v > 0:
                self._state[1:] = 0.0


def simulate_open_loop(model: PlantModel, u: np.ndarray) -> np.ndarray:
    """Positions after each input sample, starting from rest."""
    plant = Plant(model)
    return np.array([plant.step(float(ui)) for ui in u])


@dataclass(frozen=True)
class PidParams:
    """Parallel PID gains; gamma is a constant offset (gravity compensation) in volts."""

    kp: float = 420.0
    ti: float = 0.07
    td: float = 0.03
    gamma: float = 0.0
    u_min: float = 0.0
    u_max: float = 10.0

    def __post_init__(self):
        for name in ("kp", "ti", "td"):
            if not getattr(self, name) > 0:
                raise SimulationError(f"{name} must be > 0, got {getattr(self, name)}")
        if not self.u_min < self.u_max:
            raise SimulationError(f"u_min {self.u_min} must be below u_max {self.u_max}")


@dataclass(frozen=True)
class PidTerms:
    """The contributions of the last controller step, before clamping."""

    p: float
    i: float
    d: float
    unsaturated: float


class PidController:
    """
    u = clamp(kp * (e + integral(e) / ti + td * de/dt) + gamma, u_min, u_max)

    The integral uses the trapezoid rule and is held whenever the output is
    saturated and the error would push it further into saturation.
    de/dt = dr - dx_est; without an estimate yet the derivative term is 0.
    """

    def __init__(self, params: PidParams, ts: float):
        if not ts > 0:
            raise SimulationError(f"ts must be > 0, got {ts}")
        self.params = params
        self.ts = ts
        self._integral = 0.0
        self._e_prev: Optional[float] = None
        self.terms = PidTerms(0.0, 0.0, 0.0, 0.0)

    def reset(self) -> None:
        self._integral = 0.0
        self._e_prev = None

    def step(self, r: float, x_meas: float, dx_est: Optional[float], dr: float) -> float:
        p = self.params
        e = r - x_meas
        de = 0.0 if dx_est is None else dr - dx_est
        e_prev = e if self._e_prev is None else self._e_prev

        integral = self._integral + 0.5 * self.ts * (e + e_prev)
        prop = p.kp * e
        deriv = p.kp * p.td * de
        v = prop + p.kp * integral / p.ti + deriv + p.gamma
        if (v > p.u_max and e > 0) or (v < p.u_min and e < 0):
            integral = self._integral
            v = prop + p.kp * integral / p.ti + deriv + p.gamma

        self._integral = integral
        self._e_prev = e
        self.terms = PidTerms(p=prop, i=p.kp * integral / p.ti, d=deriv, unsaturated=v)
        return min(max(v, p.u_min), p.u_max)


@dataclass(frozen=True)
class NoiseModel:
    """Bounded measurement noise: every draw satisfies |w| <= d."""

    kind: str = "uniform"
    d: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise SimulationError(f"noise kind must be one of {', '.join(NOISE_KINDS)}, got {self.kind!r}")
        if self.d < 0 or not math.isfinite(self.d):
            raise SimulationError(f"noise bound d must be >= 0, got {self.d}")

    @classmethod
    def sensor_spec(cls, seed: int = 0) -> "NoiseModel":
        """Uniform noise at the sensor's repeat accuracy."""
        return cls(kind="uniform", d=SENSOR_NOISE_BOUND, seed=seed)

    def generator(self) -> np.random.Generator:
        logger.info("noise %s d=%g seed=%d", self.kind, self.d, self.seed)
        return np.random.default_rng(self.seed)

    def draw(self, n: int) -> np.ndarray:
        if self.kind == "none" or self.d == 0:
            return np.zeros(n)
        rng = self.generator()
        if self.kind == "uniform":
            w = rng.uniform(-self.d, self.d, size=n)
        else:
            # Truncated at three standard deviations.
            w = stats.truncnorm.rvs(-3.0, 3.0, scale=self.d / 3.0, size=n, random_state=rng)
        return np.clip(w, -self.d, self.d)


@dataclass(frozen=True)
class ReferenceSignal:
    """
    Designed reference (or bench test signal) with its analytic derivative.

    step: amplitude from `start` on. slope: rises at `rate` from `start` until
    it reaches amplitude, then holds. ramp: rate * t. sine: amplitude at
    `omega` rad/s. chirp: logarithmic up-chirp of amplitude from chirp_low to
    chirp_high rad/s over `duration` seconds.
    """

    kind: str = "step"
    amplitude: float = 0.01
    rate: float = 0.005
    rate_bound: float = 0.05
    omega: float = 10.0
    chirp_low: float = 1.0
    chirp_high: float = 600.0
    duration: float = 10.0
    start: float = 0.0

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise SimulationError(
                f"reference kind must be one of {', '.join(REFERENCE_KINDS)}, got {self.kind!r}"
            )
        if self.kind == "slope":
            if not 0 < self.rate < self.rate_bound:
                raise SimulationError(
                    f"slope rate must satisfy 0 < rate < {self.rate_bound}, got {self.rate}"
                )
            if not self.amplitude > 0:
                raise SimulationError(f"slope amplitude must be > 0, got {self.amplitude}")
        if self.kind == "chirp":
            if not 0 < self.chirp_low < self.chirp_high:
                raise SimulationError(
                    f"chirp range must satisfy 0 < low < high, got {self.chirp_low}..{self.chirp_high}"
                )
            if not self.duration > 0:
                raise SimulationError(f"chirp duration must be > 0, got {self.duration}")

    def instantaneous_omega(self, t: np.ndarray) -> np.ndarray:
        ratio = self.chirp_high / self.chirp_low
        return self.chirp_low * ratio ** (np.asarray(t) / self.duration)

    def chirp_phase(self, t: np.ndarray) -> np.ndarray:
        ratio = self.chirp_high / self.chirp_low
        scale = self.chirp_low * self.duration / math.log(ratio)
        return scale * (ratio ** (np.asarray(t) / self.duration) - 1.0)

    def evaluate(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reference value and its time derivative at times t."""
        t = np.asarray(t, dtype=float)
        if self.kind == "step":
            r = np.where(t >= self.start, self.amplitude, 0.0)
            return r, np.zeros_like(t)
        if self.kind == "slope":
            elapsed = np.clip(t - self.start, 0.0, None)
            t_hold = self.amplitude / self.rate
            r = np.minimum(self.rate * elapsed, self.amplitude)
            dr = np.where((t >= self.start) & (elapsed < t_hold), self.rate, 0.0)
            return r, dr
        if self.kind == "ramp":
            return self.rate * t, np.full_like(t, self.rate)
        if self.kind == "sine":
            return (
                self.amplitude * np.sin(self.omega * t),
                self.amplitude * self.omega * np.cos(self.omega * t),
            )
        r = self.amplitude * signal.chirp(
            t,
            f0=self.chirp_low / (2 * math.pi),
            t1=self.duration,
            f1=self.chirp_high / (2 * math.pi),
            method="logarithmic",
            phi=-90,
        )
        dr = self.amplitude * self.instantaneous_omega(t) * np.cos(self.chirp_phase(t))
        return r, dr


@dataclass
class LoopSetup:
    """Everything one closed-loop run needs."""

    plant: PlantModel
    pid: PidParams
    differentiator: Differentiator
    reference: ReferenceSignal
    noise: NoiseModel
    duration: float


@dataclass
class ClosedLoopTrace:
    """Per-sample record of a closed-loop run."""

    t: np.ndarray
    r: np.ndarray
    dr: np.ndarray
    x_true: np.ndarray
    dx_true: np.ndarray
    x_meas: np.ndarray
    dx_est: np.ndarray
    u: np.ndarray
    r_star: np.ndarray
    columns: tuple[str, ...] = field(
        default=("t", "r", "x_true", "x_meas", "u", "dx_est", "r_star"), repr=False
    )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({name: getattr(self, name) for name in self.columns})
        frame["r_star"] = pd.array(
            [None if math.isnan(v) else int(v) for v in self.r_star], dtype="Int64"
        )
        return frame


def run_closed_loop(setup: LoopSetup) -> ClosedLoopTrace:
    """
    Simulate the sampled loop: measure, differentiate, control, advance plant.

    Deterministic for a given setup (noise comes from the seeded generator).
    """
    ts = setup.plant.ts
    n = int(round(setup.duration / ts))
    if n < 1:
        raise SimulationError(f"duration {setup.duration} s is shorter than one sample")

    t = np.arange(n) * ts
    r, dr = setup.reference.evaluate(t)
    w = setup.noise.draw(n)

    plant = Plant(setup.plant)
    pid = PidController(setup.pid, ts)
    differentiator = setup.differentiator
    differentiator.reset()

    x_true = np.empty(n)
    dx_true = np.empty(n)
    x_meas = np.empty(n)
    dx_est = np.full(n, np.nan)
    u = np.empty(n)
    r_star = np.full(n, np.nan)

    for i in range(n):
        x_true[i] = plant.position
        dx_true[i] = plant.velocity
        x_meas[i] = x_true[i] + w[i]
        out = differentiator.step(Sample(float(t[i]), float(x_meas[i])))
        if out.dx_hat is not None:
            dx_est[i] = out.dx_hat
        if out.r_star is not None:
            r_star[i] = out.r_star
        u[i] = pid.step(float(r[i]), float(x_meas[i]), out.dx_hat, float(dr[i]))
        plant.step(float(u[i]))

    return ClosedLoopTrace(
        t=t, r=r, dr=dr, x_true=x_true, dx_true=dx_true, x_meas=x_meas, dx_est=dx_est, u=u, r_star=r_star
    )
