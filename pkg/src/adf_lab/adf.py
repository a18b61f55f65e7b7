"""Adaptive differentiating filter (ADF).

A causal derivative estimator. At every sample the filter picks the largest
window over which the recent measurements fit inside a +/- delta band around
some line, then fits a least-squares line over that window with the fitted
value pinned within delta of the newest measurement.

Window feasibility is decided without fitting anything: a window admits such a
line iff m <= M, where over all sample pairs t_i > t_j

    m = max (x_i - x_j - 2*delta) / (t_i - t_j)
    M = min (x_i - x_j + 2*delta) / (t_i - t_j)

The per-anchor partial extrema m_bar / M_bar are kept incrementally. Adding a
sample on the right costs O(R); dropping the oldest sample is a truncation.

Memory is fixed at construction: a ring of r_max + 1 samples, the two envelope
vectors and a few scratch vectors of length r_max. Steady-state stepping only
creates short-lived views and the returned FilterOutput.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

UNIFORM_RTOL = 1e-6


class AdfError(ValueError):
    """Base exception for adaptive differentiating filter errors."""


class InvalidParamsError(AdfError):
    """Raised when filter parameters violate their invariants."""


class NonIncreasingTimestampError(AdfError):
    """Raised when a sample does not strictly advance time."""


class NonUniformSamplingError(AdfError):
    """Raised when the uniform fast path receives an off-grid sample."""


class InvalidSampleError(AdfError):
    """Raised when a sample carries a non-finite time or value."""


@dataclass(frozen=True)
class Sample:
    """One timestamped measurement (t in seconds, x in signal units)."""

    t: float
    x: float


@dataclass(frozen=True)
class AdfParams:
    """
    ADF tuning.

    Args:
        delta: Approximation band in signal units. Tune it just above the
            noise amplitude; smaller values let noise through, much larger
            values pin the window at r_max.
        r_max: Maximal window size (the window spans r_max + 1 samples).
        ts: Sampling period, only used by the uniform fast path.
        uniform: Use precomputed least-squares weights. Requires ts and a
            stream on a fixed grid.
    """

    delta: float
    r_max: int
    ts: Optional[float] = None
    uniform: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise InvalidParamsError(f"delta must be > 0, got {self.delta}")
        if isinstance(self.r_max, bool) or not isinstance(self.r_max, int) or self.r_max < 1:
            raise InvalidParamsError(f"r_max must be an integer >= 1, got {self.r_max!r}")
        if self.uniform and (self.ts is None or not self.ts > 0):
            raise InvalidParamsError("uniform sampling requires ts > 0")


@dataclass(frozen=True)
class FilterOutput:
    """
    Per-sample estimate.

    dx_hat is None when no derivative exists yet (first sample of a stream).
    r_star is the window size used, None for filters without windows.
    """

    x_hat: float
    dx_hat: Optional[float]
    r_star: Optional[int] = None
    constrained: bool = False

    @property
    def has_derivative(self) -> bool:
        return self.dx_hat is not None


def _as_arrays(window: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    t = np.fromiter((s.t for s in window), dtype=float, count=len(window))
    x = np.fromiter((s.x for s in window), dtype=float, count=len(window))
    return t, x


def _check_window(t: np.ndarray) -> None:
    if len(t) < 2:
        raise AdfError("a window needs at least 2 samples")
    if np.any(np.diff(t) <= 0):
        raise NonIncreasingTimestampError("window times must be strictly increasing")


def _fit_unconstrained(t: np.ndarray, x: np.ndarray) -> tuple[float, float]:
    # Times shifted so the newest sample sits at 0; b is the fitted value there.
    shifted = t - t[-1]
    t_mean = shifted.mean()
    x_mean = x.mean()
    centered = shifted - t_mean
    k = float(np.dot(centered, x - x_mean) / np.dot(centered, centered))
    return k, float(x_mean - k * t_mean)


def _pin_intercept(
    t: np.ndarray, x: np.ndarray, delta: float, k: float, b: float
) -> tuple[float, float, bool]:
    x_last = float(x[-1])
    if abs(x_last - b) <= delta:
        return k, b, False
    b_pinned = x_last + math.copysign(delta, b - x_last)
    shifted = t - t[-1]
    k_pinned = float(np.dot(shifted, x - b_pinned) / np.dot(shifted, shifted))
    return k_pinned, b_pinned, True


def ls_fit_unconstrained(window: Sequence[Sample]) -> tuple[float, float]:
    """
    Least-squares line over a window, in the newest-sample time frame.

    Returns:
        (k, b): slope and the fitted value at the newest sample time.
    """
    t, x = _as_arrays(window)
    _check_window(t)
    return _fit_unconstrained(t, x)


def ls_fit_constrained(window: Sequence[Sample], delta: float) -> tuple[float, float, bool]:
    """
    Least-squares line with the fitted newest value held within delta of the
    newest measurement.

    When the unconstrained intercept already lies in the band it is returned
    as is. Otherwise the intercept is clamped to the nearer band edge and the
    slope re-minimised with that intercept fixed:
    k = sum(T_i * (x_i - b)) / sum(T_i ** 2) with T_i = t_i - t_newest.

    Returns:
        (k, b, constrained)
    """
    if not delta > 0:
        raise InvalidParamsError(f"delta must be > 0, got {delta}")
    t, x = _as_arrays(window)
    _check_window(t)
    k, b = _fit_unconstrained(t, x)
    return _pin_intercept(t, x, delta, k, b)


def precompute_phi_psi(r: int, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Least-squares weights for a uniform grid of r + 1 samples ending at 0.

    Weights are ordered oldest to newest, so for values X on that grid
    k = X @ phi and b = X @ psi. psi uses the mean of the shifted times.
    """
    if r < 1:
        raise InvalidParamsError(f"window size must be >= 1, got {r}")
    if not ts > 0:
        raise InvalidParamsError(f"ts must be > 0, got {ts}")
    shifted = -ts * np.arange(r, -1, -1, dtype=float)
    t_mean = shifted.mean()
    centered = shifted - t_mean
    phi = centered / np.dot(centered, centered)
    psi = 1.0 / (r + 1) - t_mean * phi
    return phi, psi


class _WeightTable:
    """Precomputed phi/psi per window size for the uniform fast path."""

    def __init__(self, r_max: int, ts: float):
        self.phi: list[np.ndarray] = []
        self.psi: list[np.ndarray] = []
        self.shifted: list[np.ndarray] = []
        self.shifted_sum: list[float] = []
        self.shifted_sq: list[float] = []
        for r in range(1, r_max + 1):
            phi, psi = precompute_phi_psi(r, ts)
            shifted = -ts * np.arange(r, -1, -1, dtype=float)
            self.phi.append(phi)
            self.psi.append(psi)
            self.shifted.append(shifted)
            self.shifted_sum.append(float(shifted.sum()))
            self.shifted_sq.append(float(np.dot(shifted, shifted)))

    def fit(self, r: int, x: np.ndarray, delta: float) -> tuple[float, float, bool]:
        i = r - 1
        k = float(np.dot(x, self.phi[i]))
        b = float(np.dot(x, self.psi[i]))
        x_last = float(x[-1])
        if abs(x_last - b) <= delta:
            return k, b, False
        b_pinned = x_last + math.copysign(delta, b - x_last)
        k_pinned = (float(np.dot(self.shifted[i], x)) - b_pinned * self.shifted_sum[i]) / self.shifted_sq[i]
        return k_pinned, b_pinned, True


class _SampleRing:
    """Last `capacity` samples, each written twice so any recent run is one contiguous slice."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._t = np.empty(2 * capacity)
        self._x = np.empty(2 * capacity)
        self.count = 0

    def push(self, t: float, x: float) -> None:
        slot = self.count % self.capacity
        self._t[slot] = self._t[slot + self.capacity] = t
        self._x[slot] = self._x[slot + self.capacity] = x
        self.count += 1

    def _newest(self) -> int:
        return (self.count - 1) % self.capacity + self.capacity

    def last(self) -> tuple[float, float]:
        i = self._newest()
        return float(self._t[i]), float(self._x[i])

    def window(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of the newest r + 1 samples, oldest first."""
        i = self._newest()
        return self._t[i - r : i + 1], self._x[i - r : i + 1]

    def history(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of the n samples before the newest, most recent first."""
        i = self._newest()
        # Stop index stays >= 0 because n < capacity.
        return self._t[i - 1 : i - 1 - n : -1], self._x[i - 1 : i - 1 - n : -1]


class _SlopeEnvelopes:
    """
    m_bar / M_bar storage. Index k - 1 holds the extremum for anchor j = l - k.

    Two buffers per vector are swapped on every growth step so the shifted
    update never reads and writes the same memory.
    """

    def __init__(self, capacity: int, delta: float):
        self._two_delta = 2.0 * delta
        self._lo = np.empty(capacity)
        self._hi = np.empty(capacity)
        self._lo_next = np.empty(capacity)
        self._hi_next = np.empty(capacity)
        self._dt = np.empty(capacity)
        self._cand_lo = np.empty(capacity)
        self._cand_hi = np.empty(capacity)
        self._run_lo = np.empty(capacity)
        self._run_hi = np.empty(capacity)
        self.size = 0

    @property
    def lo(self) -> np.ndarray:
        return self._lo[: self.size]

    @property
    def hi(self) -> np.ndarray:
        return self._hi[: self.size]

    def grow(self, t_new: float, x_new: float, t_rev: np.ndarray, x_rev: np.ndarray) -> None:
        """
        Add a sample on the right.

        t_rev / x_rev hold the previous samples, most recent first; their
        length is the new envelope size (old size + 1, or the old size when
        the oldest anchor has to drop to respect capacity).
        """
        n = len(t_rev)
        dt = np.subtract(t_new, t_rev, out=self._dt[:n])
        cand_lo = np.subtract(x_new, x_rev, out=self._cand_lo[:n])
        cand_hi = np.add(cand_lo, self._two_delta, out=self._cand_hi[:n])
        np.subtract(cand_lo, self._two_delta, out=cand_lo)
        np.divide(cand_lo, dt, out=cand_lo)
        np.divide(cand_hi, dt, out=cand_hi)

        lo_next, hi_next = self._lo_next, self._hi_next
        lo_next[0] = cand_lo[0]
        hi_next[0] = cand_hi[0]
        np.maximum(self._lo[: n - 1], cand_lo[1:n], out=lo_next[1:n])
        np.minimum(self._hi[: n - 1], cand_hi[1:n], out=hi_next[1:n])

        self._lo, self._lo_next = lo_next, self._lo
        self._hi, self._hi_next = hi_next, self._hi
        self.size = n

    def truncate(self, n: int) -> None:
        self.size = n

    def bounds(self) -> tuple[float, float]:
        """(m, M) over the current envelopes."""
        return float(self.lo.max()), float(self.hi.min())

    def running_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Prefix max of m_bar and prefix min of M_bar: (m, M) of every shorter window."""
        n = self.size
        run_lo = np.maximum.accumulate(self._lo[:n], out=self._run_lo[:n])
        run_hi = np.minimum.accumulate(self._hi[:n], out=self._run_hi[:n])
        return run_lo, run_hi


def feasible(window: Sequence[Sample], delta: float) -> bool:
    """
    Whether some line stays within delta of every sample in the window.

    Decided by m <= M, with the envelopes built through the same add-right
    recurrences the filter uses. Boundary ties (m == M) count as feasible.
    Windows of fewer than 2 samples are feasible by convention.
    """
    if not delta > 0:
        raise InvalidParamsError(f"delta must be > 0, got {delta}")
    if len(window) < 2:
        return True
    t, x = _as_arrays(window)
    _check_window(t)
    envelopes = _SlopeEnvelopes(len(t) - 1, delta)
    for i in range(1, len(t)):
        envelopes.grow(t[i], x[i], t[i - 1 :: -1], x[i - 1 :: -1])
    m, big_m = envelopes.bounds()
    return m <= big_m


class AdaptiveDifferentiator:
    """
    Streaming ADF state machine.

    One step per sample: grow the window by one (capped at r_max and by the
    number of samples seen), shrink it one sample at a time while m > M, then
    solve the constrained least-squares fit on what is left. A two-point
    window is always feasible, so the shrink loop terminates.

    Not safe for concurrent steps on the same instance.
    """

    def __init__(self, params: AdfParams):
        self.params = params
        self._ring = _SampleRing(params.r_max + 1)
        self._envelopes = _SlopeEnvelopes(params.r_max, params.delta)
        self._weights = _WeightTable(params.r_max, params.ts) if params.uniform else None
        logger.debug(
            "ADF delta=%g r_max=%d path=%s",
            params.delta,
            params.r_max,
            "uniform" if params.uniform else "general",
        )

    @property
    def r(self) -> int:
        """Current window size R (1 before the first window exists)."""
        return max(self._envelopes.size, 1)

    @property
    def m_bar(self) -> np.ndarray:
        return self._envelopes.lo.copy()

    @property
    def M_bar(self) -> np.ndarray:  # noqa: N802
        return self._envelopes.hi.copy()

    @property
    def samples_seen(self) -> int:
        return self._ring.count

    def window(self) -> list[Sample]:
        """The samples of the current window W_l(R), oldest first."""
        if self._ring.count == 0:
            return []
        t, x = self._ring.window(self._envelopes.size)
        return [Sample(float(ti), float(xi)) for ti, xi in zip(t, x)]

    def reset(self) -> None:
        self._ring.count = 0
        self._envelopes.truncate(0)

    def _accept(self, sample: Sample) -> tuple[float, float]:
        t, x = float(sample.t), float(sample.x)
        if not (math.isfinite(t) and math.isfinite(x)):
            raise InvalidSampleError(f"non-finite sample ({t}, {x})")
        if self._ring.count:
            t_last, _ = self._ring.last()
            if t <= t_last:
                raise NonIncreasingTimestampError(
                    f"timestamp {t!r} does not advance past {t_last!r}"
                )
            if self._weights is not None:
                ts = self.params.ts
                if abs((t - t_last) - ts) > UNIFORM_RTOL * ts:
                    raise NonUniformSamplingError(
                        f"sample spacing {t - t_last!r} is off the {ts!r} s grid"
                    )
        self._ring.push(t, x)
        return t, x

    def add_right(self, sample: Sample) -> None:
        """
        Append a sample and extend the envelopes by one anchor.

        At r_max the oldest anchor drops instead, so the window slides.
        """
        t, x = self._accept(sample)
        if self._ring.count == 1:
            return
        n = min(self._envelopes.size + 1, self.params.r_max)
        t_rev, x_rev = self._ring.history(n)
        self._envelopes.grow(t, x, t_rev, x_rev)

    def remove_left(self) -> None:
        """Drop the oldest sample of the window (envelope prefix truncation)."""
        size = self._envelopes.size
        if size < 2:
            raise AdfError("cannot shrink below a two-point window")
        self._envelopes.truncate(size - 1)

    def is_feasible(self) -> bool:
        if self._envelopes.size == 0:
            return True
        m, big_m = self._envelopes.bounds()
        return m <= big_m

    def step(self, sample: Sample) -> FilterOutput:
        """
        Consume one sample and return the estimate.

        The first sample of a stream returns x_hat = x with no derivative.

        Raises:
            NonIncreasingTimestampError: If time does not advance. The state
                is left untouched.
            NonUniformSamplingError: On the uniform path, if the sample is
                off the sampling grid.
        """
        self.add_right(sample)
        if self._ring.count == 1:
            return FilterOutput(x_hat=float(sample.x), dx_hat=None)

        run_lo, run_hi = self._envelopes.running_bounds()
        while self._envelopes.size > 1 and run_lo[self._envelopes.size - 1] > run_hi[self._envelopes.size - 1]:
            self.remove_left()

        r = self._envelopes.size
        k, b, constrained = self._estimate(r)
        return FilterOutput(x_hat=b, dx_hat=k, r_star=r, constrained=constrained)

    def _estimate(self, r: int) -> tuple[float, float, bool]:
        t_win, x_win = self._ring.window(r)
        if self._weights is not None:
            return self._weights.fit(r, x_win, self.params.delta)
        k, b = _fit_unconstrained(t_win, x_win)
        return _pin_intercept(t_win, x_win, self.params.delta, k, b)
