"""Experiment orchestration - signals, filters, simulator, metrics and output."""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from scipy import signal

from adf_lab.adf import Sample
from adf_lab.config import ConfigError, ExperimentConfig
from adf_lab.differentiators import (
    Differentiator,
    DifferentiatorError,
    UnknownDifferentiatorError,
    build_differentiator,
)
from adf_lab.frf import estimate_frf, ideal_gain_db
from adf_lab.sim import LoopSetup, ReferenceSignal, run_closed_loop
from adf_lab.storage import ingest_csv, write_run_record, write_trace

logger = logging.getLogger(__name__)

COMPARISON_FILTERS = ("adf", "ldf", "red")


class ExperimentError(Exception):
    """Base exception for experiment errors."""


class UnknownFilterError(ExperimentError):
    """Raised when a filter name does not match any differentiator."""


class OutputError(ExperimentError):
    """Raised when results cannot be written."""


@dataclass
class Metrics:
    """Scalar summary of a run. Quantities that do not apply are None."""

    derivative_rmse: Optional[float] = None
    output_rmse: Optional[float] = None
    control_hf_power: Optional[float] = None
    mean_r_star: Optional[float] = None
    max_r_star: Optional[int] = None
    ns_per_sample: Optional[float] = None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ExperimentResult:
    """Result of an experiment run."""

    config: ExperimentConfig
    trace: pd.DataFrame
    metrics: Optional[Metrics]
    label: str


def make_differentiator(config: ExperimentConfig, name: Optional[str] = None) -> Differentiator:
    """Build the configured differentiator (or the named one with the config's parameters)."""
    try:
        return build_differentiator(
            name or config.filter,
            ts=config.ts,
            delta=config.delta,
            r_max=config.r_max,
            uniform=config.uniform_fast_path,
            omega0=config.omega0,
            kappa=config.kappa,
        )
    except UnknownDifferentiatorError as e:
        raise UnknownFilterError(str(e)) from e
    except DifferentiatorError as e:
        raise ConfigError(str(e)) from e


def _rmse(error: np.ndarray) -> Optional[float]:
    error = error[np.isfinite(error)]
    if error.size == 0:
        return None
    return float(np.sqrt(np.mean(error**2)))


def _window_stats(r_star: np.ndarray) -> tuple[Optional[float], Optional[int]]:
    valid = r_star[np.isfinite(r_star)]
    if valid.size == 0:
        return None, None
    return float(valid.mean()), int(valid.max())


def control_hf_power(u: np.ndarray, ts: float, cutoff_hz: float) -> float:
    """Power of u above cutoff_hz, from the Welch power spectral density."""
    freqs, psd = signal.welch(u, fs=1.0 / ts, nperseg=min(1024, len(u)))
    df = freqs[1] - freqs[0] if len(freqs) > 1 else 0.0
    return float(psd[freqs > cutoff_hz].sum() * df)


def _sample_count(config: ExperimentConfig) -> int:
    n = int(round(config.duration / config.ts))
    if n < 2:
        raise ConfigError(f"duration: {config.duration} s gives {n} sample(s), need at least 2")
    return n


def run_filter_bench(config: ExperimentConfig) -> ExperimentResult:
    """
    Feed a generated noisy signal through the selected filter.

    The trace has columns t, x_true, x_meas, dx_true, dx_est, r_star.
    Errors are measured after config.transient seconds.
    """
    config = config.with_overrides(experiment="bench").validate()
    n = _sample_count(config)
    differentiator = make_differentiator(config)
    t = np.arange(n) * config.ts
    x_true, dx_true = config.reference().evaluate(t)
    x_meas = x_true + config.noise_model().draw(n)

    x_hat = np.full(n, np.nan)
    dx_est = np.full(n, np.nan)
    r_star = np.full(n, np.nan)
    started = time.perf_counter_ns()
    for i in range(n):
        out = differentiator.step(Sample(float(t[i]), float(x_meas[i])))
        x_hat[i] = out.x_hat
        if out.dx_hat is not None:
            dx_est[i] = out.dx_hat
        if out.r_star is not None:
            r_star[i] = out.r_star
    elapsed = time.perf_counter_ns() - started

    settled = t >= config.transient
    mean_r, max_r = _window_stats(r_star[settled])
    metrics = Metrics(
        derivative_rmse=_rmse((dx_est - dx_true)[settled]),
        output_rmse=_rmse((x_hat - x_true)[settled]),
        mean_r_star=mean_r,
        max_r_star=max_r,
        ns_per_sample=elapsed / n,
    )
    trace = pd.DataFrame(
        {"t": t, "x_true": x_true, "x_meas": x_meas, "dx_true": dx_true, "dx_est": dx_est}
    )
    trace["r_star"] = _nullable_int(r_star)
    logger.info("bench %s: derivative RMSE %s", config.filter, metrics.derivative_rmse)
    return ExperimentResult(config=config, trace=trace, metrics=metrics, label=f"bench-{config.filter}")


def _nullable_int(values: np.ndarray) -> pd.arrays.IntegerArray:
    return pd.array([None if np.isnan(v) else int(v) for v in values], dtype="Int64")


def run_frf(config: ExperimentConfig) -> ExperimentResult:
    """
    Chirp-based gain curves of one filter, or of adf, ldf and red when
    config.filter is "all", next to the ideal |j w| column.
    """
    config = config.with_overrides(experiment="frf").validate()
    names = COMPARISON_FILTERS if config.filter == "all" else (config.filter,)
    chirp = ReferenceSignal(
        kind="chirp",
        amplitude=config.amplitude,
        chirp_low=config.chirp_low,
        chirp_high=config.chirp_high,
        duration=config.duration,
    )
    noise = config.noise_model()

    table: Optional[pd.DataFrame] = None
    for name in names:
        frf = estimate_frf(
            make_differentiator(config, name), chirp, config.ts, config.bins_per_decade, noise
        )
        column = frf[["omega", "gain_db"]].rename(columns={"gain_db": f"{name}_db"})
        table = column if table is None else table.merge(column, on="omega", how="outer")

    table.insert(1, "ideal_db", ideal_gain_db(table["omega"].to_numpy()))
    return ExperimentResult(config=config, trace=table, metrics=None, label=f"frf-{config.filter}")


def run_closed_loop_experiment(config: ExperimentConfig) -> ExperimentResult:
    """
    Closed-loop PID run with the selected differentiator on the derivative channel.

    The trace has columns t, r, x_true, x_meas, u, dx_est, r_star.
    """
    config = config.with_overrides(experiment="loop").validate()
    setup = LoopSetup(
        plant=config.plant_model(),
        pid=config.pid_params(),
        differentiator=make_differentiator(config),
        reference=config.reference(),
        noise=config.noise_model(),
        duration=config.duration,
    )
    _sample_count(config)
    started = time.perf_counter_ns()
    trace = run_closed_loop(setup)
    elapsed = time.perf_counter_ns() - started

    settled = trace.t >= config.transient
    mean_r, max_r = _window_stats(trace.r_star[settled])
    metrics = Metrics(
        derivative_rmse=_rmse((trace.dx_est - trace.dx_true)[settled]),
        output_rmse=_rmse((trace.r - trace.x_true)[settled]),
        control_hf_power=control_hf_power(trace.u[settled], config.ts, config.hf_cutoff),
        mean_r_star=mean_r,
        max_r_star=max_r,
        ns_per_sample=elapsed / len(trace.t),
    )
    logger.info("loop %s: control HF power %.4g V^2", config.filter, metrics.control_hf_power)
    return ExperimentResult(
        config=config, trace=trace.to_frame(), metrics=metrics, label=f"loop-{config.filter}"
    )


def run_comparison(
    config: ExperimentConfig,
    filters: tuple[str, ...] = COMPARISON_FILTERS,
    workers: Optional[int] = None,
) -> list[ExperimentResult]:
    """Closed-loop runs for several filters, one process per job, in filter order."""
    configs = [config.with_overrides(filter=name, experiment="loop") for name in filters]
    for c in configs:
        c.validate()
    if workers == 1:
        return [run_closed_loop_experiment(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_closed_loop_experiment, configs))


def run_ingested(path: Path, config: ExperimentConfig) -> ExperimentResult:
    """
    Run the selected filter over an externally recorded (t, x) CSV.

    The trace has columns t, x, x_hat, dx_est, r_star.
    """
    samples = ingest_csv(path)
    differentiator = make_differentiator(config)
    if config.filter in ("ldf", "red"):
        spacing = np.diff([s.t for s in samples])
        if spacing.size and not np.allclose(spacing, config.ts, rtol=1e-6, atol=0.0):
            logger.warning(
                "%s assumes a fixed period of %g s but the recorded stream is not on that grid",
                config.filter,
                config.ts,
            )

    rows = []
    started = time.perf_counter_ns()
    for s in samples:
        out = differentiator.step(s)
        rows.append((s.t, s.x, out.x_hat, out.dx_hat, out.r_star))
    elapsed = time.perf_counter_ns() - started

    trace = pd.DataFrame(rows, columns=["t", "x", "x_hat", "dx_est", "r_star"])
    trace["dx_est"] = trace["dx_est"].astype(float)
    trace["r_star"] = trace["r_star"].astype("Int64")
    r_star = trace["r_star"].to_numpy(dtype=float, na_value=np.nan)
    mean_r, max_r = _window_stats(r_star)
    metrics = Metrics(mean_r_star=mean_r, max_r_star=max_r, ns_per_sample=elapsed / len(samples))
    return ExperimentResult(config=config, trace=trace, metrics=metrics, label=f"ingest-{config.filter}")


def save_result(result: ExperimentResult, path: Path) -> Path:
    """
    Write the trace CSV and its JSON run record (resolved config and metrics).

    Raises:
        OutputError: If the files cannot be written.
    """
    try:
        csv_path = write_trace(result.trace, path)
        write_run_record(
            csv_path,
            result.config.as_dict(),
            result.metrics.as_dict() if result.metrics is not None else None,
        )
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    logger.info("wrote %s", csv_path)
    return csv_path
