"""Command-line interface for adf-lab."""

import logging
from pathlib import Path
from typing import Annotated, Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from adf_lab import __version__
from adf_lab.config import ConfigError, ExperimentConfig, get_config
from adf_lab.experiments import (
    COMPARISON_FILTERS,
    ExperimentError,
    ExperimentResult,
    Metrics,
    run_closed_loop_experiment,
    run_comparison,
    run_filter_bench,
    run_frf,
    run_ingested,
    save_result,
)

app = typer.Typer(
    name="adf-lab",
    help="Adaptive differentiating filter benches, frequency responses and closed-loop runs",
    add_completion=False,
)
console = Console()
err_console = Console(stderr=True)

ConfigPath = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="Flat key=value configuration file")
]
Output = Annotated[Optional[Path], typer.Option("--output", "-o", help="Trace CSV to write")]
Filter = Annotated[Optional[str], typer.Option("--filter", "-f", help="adf, ldf, red or fd")]
Delta = Annotated[Optional[float], typer.Option("--delta", help="ADF noise bound (m)")]
RMax = Annotated[Optional[int], typer.Option("--r-max", help="ADF maximum window size")]
Uniform = Annotated[
    Optional[bool],
    typer.Option("--uniform/--no-uniform", help="ADF fast path for uniformly sampled input"),
]
Omega0 = Annotated[Optional[float], typer.Option("--omega0", help="LDF corner frequency (rad/s)")]
Kappa = Annotated[Optional[float], typer.Option("--kappa", help="RED Lipschitz constant")]
SignalKind = Annotated[
    Optional[str], typer.Option("--signal", help="step, slope, ramp, sine or chirp")
]
Amplitude = Annotated[Optional[float], typer.Option("--amplitude", help="Signal amplitude (m)")]
Rate = Annotated[Optional[float], typer.Option("--rate", help="Ramp rate (m/s)")]
Noise = Annotated[Optional[str], typer.Option("--noise", help="uniform, gaussian or none")]
NoiseD = Annotated[Optional[float], typer.Option("--noise-d", help="Noise bound d (m)")]
Seed = Annotated[Optional[int], typer.Option("--seed", help="Noise generator seed")]
Duration = Annotated[Optional[float], typer.Option("--duration", help="Run length (s)")]
Ts = Annotated[Optional[float], typer.Option("--ts", help="Sampling period (s)")]


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _fail(error: Exception) -> None:
    """Report an error as one machine-parsable line and exit."""
    typer.echo(f"error: {type(error).__name__}: {error}", err=True)
    raise typer.Exit(code=2 if isinstance(error, ConfigError) else 1)


def _resolve(config_path: Optional[Path], **overrides) -> ExperimentConfig:
    return get_config(config_path, **overrides)


def _metrics_table(rows: list[tuple[str, Metrics]]) -> Table:
    table = Table(box=None)
    table.add_column("filter", style="cyan")
    for name in Metrics().as_dict():
        table.add_column(name, justify="right")
    for label, metrics in rows:
        table.add_row(label, *[_format(v) for v in metrics.as_dict().values()])
    return table


def _format(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, int):
        return str(value)
    return f"{value:.4g}"


def _finish(result: ExperimentResult, output: Optional[Path], title: str) -> None:
    path = save_result(result, output or Path(f"{result.label}.csv"))
    lines = [f"[green]✓[/green] Trace: [cyan]{path}[/cyan]"]
    if result.metrics is not None:
        for name, value in result.metrics.as_dict().items():
            lines.append(f"[dim]{name}:[/dim] {_format(value)}")
    console.print()
    console.print(Panel.fit("\n".join(lines), title=f"[bold green]{title}[/bold green]", border_style="green"))
    console.print()


@app.command()
def bench(
    config: ConfigPath = None,
    filter: Filter = None,
    delta: Delta = None,
    r_max: RMax = None,
    uniform: Uniform = None,
    omega0: Omega0 = None,
    kappa: Kappa = None,
    signal: SignalKind = None,
    amplitude: Amplitude = None,
    rate: Rate = None,
    noise: Noise = None,
    noise_d: NoiseD = None,
    seed: Seed = None,
    duration: Duration = None,
    ts: Ts = None,
    output: Output = None,
):
    """
    Feed a generated noisy signal through one differentiator.

    Writes t, x_true, x_meas, dx_true, dx_est, r_star and reports the errors
    against the noise-free derivative.
    """
    try:
        cfg = _resolve(
            config,
            filter=filter,
            delta=delta,
            r_max=r_max,
            uniform_fast_path=uniform,
            omega0=omega0,
            kappa=kappa,
            signal=signal,
            amplitude=amplitude,
            rate=rate,
            noise=noise,
            noise_d=noise_d,
            seed=seed,
            duration=duration,
            ts=ts,
            output=output,
        )
        result = run_filter_bench(cfg)
        _finish(result, cfg.output, f"Bench: {cfg.filter}")
    except (ExperimentError, ValueError) as e:
        _fail(e)


@app.command()
def frf(
    config: ConfigPath = None,
    filter: Annotated[
        Optional[str], typer.Option("--filter", "-f", help="adf, ldf, red, fd or all")
    ] = None,
    delta: Delta = None,
    r_max: RMax = None,
    omega0: Omega0 = None,
    kappa: Kappa = None,
    amplitude: Amplitude = None,
    chirp_low: Annotated[Optional[float], typer.Option("--chirp-low", help="Start frequency (rad/s)")] = None,
    chirp_high: Annotated[Optional[float], typer.Option("--chirp-high", help="End frequency (rad/s)")] = None,
    bins_per_decade: Annotated[Optional[int], typer.Option("--bins-per-decade", help="Frequency resolution")] = None,
    noise: Noise = None,
    noise_d: NoiseD = None,
    seed: Seed = None,
    duration: Duration = None,
    ts: Ts = None,
    output: Output = None,
):
    """
    Estimate gain curves from a logarithmic chirp.

    Writes omega, ideal_db and one <filter>_db column per differentiator.
    """
    try:
        cfg = _resolve(
            config,
            experiment="frf",
            filter=filter,
            delta=delta,
            r_max=r_max,
            omega0=omega0,
            kappa=kappa,
            amplitude=amplitude,
            chirp_low=chirp_low,
            chirp_high=chirp_high,
            bins_per_decade=bins_per_decade,
            noise=noise,
            noise_d=noise_d,
            seed=seed,
            duration=duration,
            ts=ts,
            output=output,
        )
        result = run_frf(cfg)
        _finish(result, cfg.output, f"FRF: {cfg.filter}")
    except (ExperimentError, ValueError) as e:
        _fail(e)


def _loop_config(config: Optional[Path], **overrides) -> ExperimentConfig:
    return _resolve(config, experiment="loop", **overrides)


@app.command()
def loop(
    config: ConfigPath = None,
    filter: Filter = None,
    delta: Delta = None,
    r_max: RMax = None,
    omega0: Omega0 = None,
    kappa: Kappa = None,
    signal: SignalKind = None,
    amplitude: Amplitude = None,
    rate: Rate = None,
    noise: Noise = None,
    noise_d: NoiseD = None,
    seed: Seed = None,
    duration: Duration = None,
    kp: Annotated[Optional[float], typer.Option("--kp", help="Proportional gain (V/m)")] = None,
    ti: Annotated[Optional[float], typer.Option("--ti", help="Integral time (s)")] = None,
    td: Annotated[Optional[float], typer.Option("--td", help="Derivative time (s)")] = None,
    gamma: Annotated[Optional[float], typer.Option("--gamma", help="Feedforward offset (V)")] = None,
    load_offset: Annotated[Optional[float], typer.Option("--load-offset", help="Constant plant load (V)")] = None,
    clamp: Annotated[
        Optional[bool], typer.Option("--clamp/--no-clamp", help="Stop the armature at its travel limits")
    ] = None,
    output: Output = None,
):
    """
    Run the PID loop with the selected differentiator on the derivative channel.

    Writes t, r, x_true, x_meas, u, dx_est, r_star.
    """
    try:
        cfg = _loop_config(
            config,
            filter=filter,
            delta=delta,
            r_max=r_max,
            omega0=omega0,
            kappa=kappa,
            signal=signal,
            amplitude=amplitude,
            rate=rate,
            noise=noise,
            noise_d=noise_d,
            seed=seed,
            duration=duration,
            kp=kp,
            ti=ti,
            td=td,
            gamma=gamma,
            load_offset=load_offset,
            clamp_position=clamp,
            output=output,
        )
        result = run_closed_loop_experiment(cfg)
        _finish(result, cfg.output, f"Loop: {cfg.filter}")
    except (ExperimentError, ValueError) as e:
        _fail(e)


@app.command()
def compare(
    config: ConfigPath = None,
    signal: SignalKind = None,
    amplitude: Amplitude = None,
    rate: Rate = None,
    seed: Seed = None,
    duration: Duration = None,
    workers: Annotated[Optional[int], typer.Option("--workers", "-w", help="Worker processes")] = None,
    output_dir: Annotated[
        Optional[Path], typer.Option("--output-dir", "-o", help="Directory for one trace per filter")
    ] = None,
):
    """
    Run the closed loop once per filter (adf, ldf, red) and tabulate the metrics.
    """
    try:
        cfg = _loop_config(
            config, signal=signal, amplitude=amplitude, rate=rate, seed=seed, duration=duration
        )
        results = run_comparison(cfg, COMPARISON_FILTERS, workers)
        if output_dir is not None:
            for result in results:
                save_result(result, output_dir / f"{result.label}.csv")
    except (ExperimentError, ValueError) as e:
        _fail(e)

    console.print()
    console.print(
        Panel.fit(
            _metrics_table([(r.config.filter, r.metrics) for r in results]),
            title=f"[bold green]Closed loop: {cfg.signal}[/bold green]",
            border_style="green",
        )
    )
    console.print()


@app.command()
def ingest(
    path: Annotated[Path, typer.Argument(help="CSV with columns t, x")],
    config: ConfigPath = None,
    filter: Filter = None,
    delta: Delta = None,
    r_max: RMax = None,
    omega0: Omega0 = None,
    kappa: Kappa = None,
    ts: Ts = None,
    output: Output = None,
):
    """
    Run the selected differentiator over an externally recorded stream.

    Writes t, x, x_hat, dx_est, r_star.
    """
    try:
        cfg = _resolve(
            config, filter=filter, delta=delta, r_max=r_max, omega0=omega0, kappa=kappa, ts=ts, output=output
        )
        result = run_ingested(path, cfg)
        _finish(result, cfg.output, f"Ingest: {cfg.filter}")
    except (ExperimentError, ValueError) as e:
        _fail(e)


@app.command(name="config")
def config_command(config: ConfigPath = None):
    """
    Show the resolved configuration (defaults, file, environment).
    """
    try:
        cfg = _resolve(config)
    except ValueError as e:
        _fail(e)

    table = Table(box=None, show_header=False)
    table.add_column(style="cyan")
    table.add_column()
    for name, value in cfg.as_dict().items():
        table.add_row(name, str(value))
    console.print()
    console.print(Panel.fit(table, title="[bold]ADF Lab Configuration[/bold]", border_style="blue"))
    console.print()


def version_callback(value: bool):
    """Show version and exit."""
    if value:
        console.print(f"adf-lab version {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-v",
        help="Show version and exit",
        callback=version_callback,
        is_eager=True,
    ),
    verbose: bool = typer.Option(False, "--verbose", "-V", help="Debug logging"),
):
    """
    ADF Lab - derivative estimation experiments.
    """
    _setup_logging(verbose)


if __name__ == "__main__":
    app()
