"""Empirical frequency response of a differentiator from a chirp run.

The input is a logarithmic up-chirp A sin(phi(t)). Its exact derivative is
A w(t) cos(phi(t)). Samples are grouped into logarithmic frequency bins and,
per bin, the differentiator output is fitted by least squares against the
in-phase and quadrature parts of that exact derivative. The fitted amplitude
ratio times the bin-centre frequency is the gain.

The chirp only gives a quasi-steady-state picture: at the low end a bin spans
less than a period and the curve shows ripples.
"""

import logging
import math
from typing import Optional

import numpy as np
import pandas as pd

from adf_lab.adf import Sample
from adf_lab.differentiators import Differentiator
from adf_lab.sim import NoiseModel, ReferenceSignal

logger = logging.getLogger(__name__)

MIN_BIN_SAMPLES = 16


def frequency_bins(low: float, high: float, bins_per_decade: int) -> np.ndarray:
    """Logarithmically spaced bin edges covering [low, high]."""
    decades = math.log10(high / low)
    count = max(1, math.ceil(decades * bins_per_decade))
    return np.logspace(math.log10(low), math.log10(high), count + 1)


def estimate_frf(
    differentiator: Differentiator,
    chirp: ReferenceSignal,
    ts: float,
    bins_per_decade: int = 10,
    noise: Optional[NoiseModel] = None,
) -> pd.DataFrame:
    """
    Run the chirp through the differentiator and estimate its gain per bin.

    Returns:
        Frame with columns omega (bin centre, rad/s), gain_db and phase_deg.
    """
    n = int(round(chirp.duration / ts))
    t = np.arange(n) * ts
    x, _ = chirp.evaluate(t)
    if noise is not None:
        x = x + noise.draw(n)

    differentiator.reset()
    y = np.full(n, np.nan)
    for i in range(n):
        out = differentiator.step(Sample(float(t[i]), float(x[i])))
        if out.dx_hat is not None:
            y[i] = out.dx_hat

    phase = chirp.chirp_phase(t)
    omega = chirp.instantaneous_omega(t)
    in_phase = chirp.amplitude * omega * np.cos(phase)
    quadrature = chirp.amplitude * omega * np.sin(phase)

    rows = []
    edges = frequency_bins(chirp.chirp_low, chirp.chirp_high, bins_per_decade)
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (omega >= lo) & (omega < hi) & np.isfinite(y)
        if mask.sum() < MIN_BIN_SAMPLES:
            continue
        design = np.column_stack([in_phase[mask], quadrature[mask]])
        (a, b), *_ = np.linalg.lstsq(design, y[mask], rcond=None)
        ratio = math.hypot(a, b)
        centre = math.sqrt(lo * hi)
        rows.append(
            {
                "omega": centre,
                "gain_db": 20.0 * math.log10(max(ratio * centre, 1e-300)),
                "phase_deg": math.degrees(-math.atan2(b, a)),
            }
        )
    logger.debug("FRF: %d of %d bins estimated", len(rows), len(edges) - 1)
    return pd.DataFrame(rows, columns=["omega", "gain_db", "phase_deg"])


def ideal_gain_db(omega: np.ndarray) -> np.ndarray:
    """|j w| in dB."""
    return 20.0 * np.log10(np.asarray(omega, dtype=float))
