"""Slow reference implementations used by the test suite.

Nothing here is incremental or clever: feasibility is checked through the
minimax (Chebyshev) line fit, envelopes by a double loop over all pairs and
least squares by explicit normal equations or a bounded 1-D search. Meant for
windows of a few dozen samples.
"""

import itertools
from collections.abc import Sequence
from typing import Optional

import numpy as np
from scipy import optimize

from adf_lab.adf import Sample

GRID_RESOLUTION = 1e-3
REFINE_TOLERANCE = 1e-8


def chebyshev_deviation(window: Sequence[Sample]) -> float:
    """
    Smallest achievable max |x_i - (k t_i + b)| over lines.

    For lines the optimum is attained on three alternating points, so it is
    the largest over all triples of half the vertical gap between the middle
    point and the chord through the outer two.
    """
    best = 0.0
    for a, mid, c in itertools.combinations(window, 3):
        chord = a.x + (c.x - a.x) * (mid.t - a.t) / (c.t - a.t)
        best = max(best, abs(mid.x - chord) / 2.0)
    return best


def chebyshev_deviation_lp(window: Sequence[Sample]) -> float:
    """The same minimax deviation, solved as a linear program over (k, b, h)."""
    if len(window) < 3:
        return 0.0
    t_last = window[-1].t
    rows, rhs = [], []
    for s in window:
        shifted = s.t - t_last
        # x - k T - b <= h  and  -(x - k T - b) <= h
        rows.append([-shifted, -1.0, -1.0])
        rhs.append(-s.x)
        rows.append([shifted, 1.0, -1.0])
        rhs.append(s.x)
    result = optimize.linprog(
        c=[0.0, 0.0, 1.0],
        A_ub=np.array(rows),
        b_ub=np.array(rhs),
        bounds=[(None, None), (None, None), (0.0, None)],
        method="highs",
    )
    if not result.success:
        raise RuntimeError(f"linprog failed: {result.message}")
    return float(result.x[2])


def oracle_feasible(window: Sequence[Sample], delta: float) -> bool:
    """Whether a line fits every sample within delta, checked directly."""
    if len(window) < 3:
        return True
    return chebyshev_deviation(window) <= delta


def oracle_envelopes(
    window: Sequence[Sample], delta: float
) -> tuple[list[float], list[float], float, float]:
    """
    m_bar, M_bar and their extrema m, M by enumerating every pair.

    Entry k - 1 belongs to anchor j = l - k, paired with every later sample.
    """
    last = len(window) - 1
    m_bar: list[float] = []
    big_m_bar: list[float] = []
    for k in range(1, last + 1):
        j = last - k
        lo = -np.inf
        hi = np.inf
        for i in range(j + 1, last + 1):
            dt = window[i].t - window[j].t
            lo = max(lo, (window[i].x - window[j].x - 2 * delta) / dt)
            hi = min(hi, (window[i].x - window[j].x + 2 * delta) / dt)
        m_bar.append(lo)
        big_m_bar.append(hi)
    return m_bar, big_m_bar, max(m_bar), min(big_m_bar)


def _objective(shifted: np.ndarray, x: np.ndarray, k: float, b: float) -> float:
    return float(np.sum((x - k * shifted - b) ** 2))


def _slope_for(shifted: np.ndarray, x: np.ndarray, b: float) -> float:
    return float(np.dot(shifted, x - b) / np.dot(shifted, shifted))


def ls_objective(window: Sequence[Sample], k: float, b: float) -> float:
    """Sum of squared residuals of the line (k, b) in the newest-sample time frame."""
    shifted = np.array([s.t - window[-1].t for s in window])
    x = np.array([s.x for s in window])
    return _objective(shifted, x, k, b)


def oracle_ls(window: Sequence[Sample], delta: Optional[float] = None) -> tuple[float, float]:
    """
    Least-squares line (k, b) with b the value at the newest time.

    Unconstrained: 2x2 normal equations. Constrained: grid over
    b in [x_l - delta, x_l + delta] with the slope minimised per b, refined by
    a bounded scalar search around the best grid point.
    """
    shifted = np.array([s.t - window[-1].t for s in window])
    x = np.array([s.x for s in window])
    if delta is None:
        normal = np.array([[np.dot(shifted, shifted), shifted.sum()], [shifted.sum(), len(x)]])
        k, b = np.linalg.solve(normal, np.array([np.dot(shifted, x), x.sum()]))
        return float(k), float(b)

    x_last = float(x[-1])
    grid = np.linspace(x_last - delta, x_last + delta, int(round(2 / GRID_RESOLUTION)) + 1)
    costs = [_objective(shifted, x, _slope_for(shifted, x, b), b) for b in grid]
    best = int(np.argmin(costs))
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    result = optimize.minimize_scalar(
        lambda b: _objective(shifted, x, _slope_for(shifted, x, b), b),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": REFINE_TOLERANCE * delta},
    )
    b = float(result.x)
    return _slope_for(shifted, x, b), b
