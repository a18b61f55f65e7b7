"""Streaming differentiators sharing one step interface.

Besides the adaptive filter this module holds the comparison differentiators:
the raw finite difference, a linear filtered differentiator (finite difference
behind a critically damped second-order low-pass) and the second-order robust
exact differentiator (homogeneous sliding-mode observer).
"""

import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy import signal

from adf_lab.adf import AdaptiveDifferentiator, AdfParams, FilterOutput, Sample

logger = logging.getLogger(__name__)

FILTER_NAMES = ("adf", "ldf", "red", "fd")

# Second-order RED gains (toolbox parameterisation).
RED_GAINS = (3.1, 3.2, 1.1)


class DifferentiatorError(ValueError):
    """Raised for invalid differentiator parameters or names."""


class UnknownDifferentiatorError(DifferentiatorError):
    """Raised when a name does not match any differentiator."""


class Differentiator(Protocol):
    """Anything that turns a sample stream into derivative estimates."""

    def step(self, sample: Sample) -> FilterOutput: ...

    def reset(self) -> None: ...


def run_filter(differentiator: Differentiator, samples: Iterable[Sample]) -> list[FilterOutput]:
    """Feed a whole stream through a differentiator."""
    return [differentiator.step(s) for s in samples]


def finite_difference(x_now: float, x_prev: float, ts: float) -> float:
    """Two-point difference quotient (x_now - x_prev) / ts."""
    if not ts > 0:
        raise DifferentiatorError(f"ts must be > 0, got {ts}")
    return (x_now - x_prev) / ts


class FiniteDifference:
    """Raw backward difference between consecutive samples."""

    def __init__(self):
        self._prev: Optional[Sample] = None

    def reset(self) -> None:
        self._prev = None

    def step(self, sample: Sample) -> FilterOutput:
        prev, self._prev = self._prev, sample
        if prev is None:
            return FilterOutput(x_hat=sample.x, dx_hat=None)
        return FilterOutput(
            x_hat=sample.x, dx_hat=finite_difference(sample.x, prev.x, sample.t - prev.t)
        )


@dataclass(frozen=True)
class LdfParams:
    """Linear filtered differentiator: low-pass natural frequency omega0 (rad/s), period ts (s)."""

    omega0: float
    ts: float

    def __post_init__(self):
        if not self.omega0 > 0:
            raise DifferentiatorError(f"omega0 must be > 0, got {self.omega0}")
        if not self.ts > 0:
            raise DifferentiatorError(f"ts must be > 0, got {self.ts}")
        if self.omega0 * self.ts >= 2:
            # Tustin still works, but the low-pass corner is far too close to Nyquist.
            logger.warning(
                "omega0*ts = %.3g >= 2: LDF corner sits near the Nyquist frequency",
                self.omega0 * self.ts,
            )


def ldf_coefficients(params: LdfParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Tustin discretisation of s * w0^2 / (s^2 + 2 w0 s + w0^2).

    Returns:
        (b, a) with a[0] == 1.
    """
    w0 = params.omega0
    b, a = signal.bilinear([w0**2, 0.0], [1.0, 2.0 * w0, w0**2], fs=1.0 / params.ts)
    return np.asarray(b, dtype=float), np.asarray(a, dtype=float)


class LinearFilteredDifferentiator:
    """
    Second-order IIR realisation of the LDF, direct form II transposed.

    The first sample initialises the filter at rest on that value, so a
    constant offset does not produce a start-up kick. That sample carries no
    derivative.
    """

    def __init__(self, params: LdfParams):
        self.params = params
        self._b, self._a = ldf_coefficients(params)
        self._zi_unit = signal.lfilter_zi(self._b, self._a)
        self._s1 = 0.0
        self._s2 = 0.0
        self._started = False

    def reset(self) -> None:
        self._s1 = self._s2 = 0.0
        self._started = False

    def ldf_step(self, x: float) -> float:
        if not self._started:
            self._s1, self._s2 = (float(v) * x for v in self._zi_unit)
            self._started = True
        b0, b1, b2 = self._b
        _, a1, a2 = self._a
        y = b0 * x + self._s1
        self._s1 = b1 * x - a1 * y + self._s2
        self._s2 = b2 * x - a2 * y
        return y

    def step(self, sample: Sample) -> FilterOutput:
        first = not self._started
        y = self.ldf_step(sample.x)
        return FilterOutput(x_hat=sample.x, dx_hat=None if first else y)


@dataclass(frozen=True)
class RedParams:
    """RED scaling factor kappa (kappa**3 bounds the third derivative) and period ts."""

    kappa: float
    ts: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise DifferentiatorError(f"kappa must be > 0, got {self.kappa}")
        if not self.ts > 0:
            raise DifferentiatorError(f"ts must be > 0, got {self.ts}")


@dataclass(frozen=True)
class RedState:
    """Observer states: z0 ~ x, z1 ~ dx/dt, z2 ~ d2x/dt2."""

    z0: float = 0.0
    z1: float = 0.0
    z2: float = 0.0


def _sign(v: float) -> float:
    return float((v > 0) - (v < 0))


def red_step(state: RedState, x: float, params: RedParams) -> RedState:
    """One explicit-Euler step of the second-order RED."""
    l1, l2, l3 = RED_GAINS
    kappa, ts = params.kappa, params.ts
    err = x - state.z0
    sgn = _sign(err)
    mag = abs(err)
    return RedState(
        z0=state.z0 + ts * (state.z1 + l1 * kappa * mag ** (2.0 / 3.0) * sgn),
        z1=state.z1 + ts * (state.z2 + l2 * kappa**2 * mag ** (1.0 / 3.0) * sgn),
        z2=state.z2 + ts * (l3 * kappa**3 * sgn),
    )


class RobustExactDifferentiator:
    """
    Streaming RED starting from zero states; z1 is the derivative estimate.

    The first sample only advances the observer and reports no derivative.
    """

    def __init__(self, params: RedParams):
        self.params = params
        self.state = RedState()
        self._started = False

    def reset(self) -> None:
        self.state = RedState()
        self._started = False

    def step(self, sample: Sample) -> FilterOutput:
        self.state = red_step(self.state, sample.x, self.params)
        if not (math.isfinite(self.state.z0) and math.isfinite(self.state.z1)):
            raise DifferentiatorError(f"RED diverged at t={sample.t}")
        if not self._started:
            self._started = True
            return FilterOutput(x_hat=self.state.z0, dx_hat=None)
        return FilterOutput(x_hat=self.state.z0, dx_hat=self.state.z1)


def build_differentiator(
    name: str,
    *,
    ts: float,
    delta: float = 1e-4,
    r_max: int = 140,
    uniform: bool = False,
    omega0: float = 600.0,
    kappa: float = 8.0,
) -> Differentiator:
    """
    Create a differentiator by name: adf, ldf, red or fd.

    Raises:
        UnknownDifferentiatorError: If the name is unknown.
        DifferentiatorError: If a parameter of the selected filter is invalid.
    """
    key = name.strip().lower()
    if key == "adf":
        return AdaptiveDifferentiator(AdfParams(delta=delta, r_max=r_max, ts=ts, uniform=uniform))
    if key == "ldf":
        return LinearFilteredDifferentiator(LdfParams(omega0=omega0, ts=ts))
    if key == "red":
        return RobustExactDifferentiator(RedParams(kappa=kappa, ts=ts))
    if key == "fd":
        return FiniteDifference()
    raise UnknownDifferentiatorError(f"unknown filter {name!r}; choose one of {', '.join(FILTER_NAMES)}")
