"""Configuration management for experiment runs."""

import dataclasses
import logging
import math
import os
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values, load_dotenv

from adf_lab.adf import AdfError, AdfParams
from adf_lab.differentiators import FILTER_NAMES, DifferentiatorError, LdfParams, RedParams
from adf_lab.sim import NoiseModel, PidParams, PlantModel, ReferenceSignal, SimulationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "ADF_LAB_"
EXPERIMENT_KINDS = ("bench", "frf", "loop")

# Load .env file from config directory
_config_dir = Path.home() / ".config" / "adf-lab"
_env_file = _config_dir / ".env"
if _env_file.exists():
    load_dotenv(_env_file)


class ConfigError(ValueError):
    """Raised when a configuration key or value is invalid."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    """
    Flat description of one experiment run.

    Signal units are meters, time is seconds, frequencies are rad/s except
    hf_cutoff (Hz, used for the control-signal spectrum).
    """

    experiment: str = "bench"
    filter: str = "adf"
    # ADF
    delta: float = 1e-4
    r_max: int = 140
    uniform_fast_path: bool = False
    # LDF / RED
    omega0: float = 600.0
    kappa: float = 8.0
    # signal / reference
    signal: str = "ramp"
    amplitude: float = 0.01
    rate: float = 0.005
    rate_bound: float = 0.05
    omega: float = 10.0
    chirp_low: float = 1.0
    chirp_high: float = 600.0
    # noise
    noise: str = "uniform"
    noise_d: float = 1e-4
    seed: int = 0
    # timing
    duration: float = 2.0
    ts: float = 0.0005
    transient: float = 0.1
    # analysis
    hf_cutoff: float = 50.0
    bins_per_decade: int = 10
    # loop
    kp: float = 420.0
    ti: float = 0.07
    td: float = 0.03
    gamma: float = 5.0
    load_offset: float = 5.0
    u_min: float = 0.0
    u_max: float = 10.0
    clamp_position: bool = False
    output: Optional[Path] = None

    @classmethod
    def default(cls) -> "ExperimentConfig":
        """Create default configuration."""
        return cls()

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_mapping(cls, values: dict[str, Optional[str]], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Apply string-valued settings (file or environment) on top of base."""
        config = base or cls.default()
        parsed = {key: _parse_value(key, raw) for key, raw in values.items()}
        return config.with_overrides(**parsed)

    @classmethod
    def from_file(cls, path: Path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Load a flat key=value file."""
        path = Path(path).expanduser()
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_mapping(dict(dotenv_values(path)), base)

    @classmethod
    def from_env(cls, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """
        Load configuration from ADF_LAB_* environment variables.

        Variables that name no config field are skipped with a warning.
        """
        names = set(cls.field_names())
        values = {}
        for key, raw in os.environ.items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX) :].lower()
            if name not in names:
                logger.warning("Ignoring %s: not a config field", key)
                continue
            values[name] = raw
        return cls.from_mapping(values, base)

    def with_overrides(self, **values: Any) -> "ExperimentConfig":
        """Copy with the given fields replaced; None values are ignored."""
        names = set(self.field_names())
        for key in values:
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
        changes = {key: value for key, value in values.items() if value is not None}
        if "output" in changes:
            changes["output"] = Path(changes["output"]).expanduser()
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, Any]:
        """Resolved parameters as plain JSON-friendly values."""
        data = dataclasses.asdict(self)
        data["output"] = str(self.output) if self.output is not None else None
        return data

    # Validated parameter objects -------------------------------------------

    def adf_params(self) -> AdfParams:
        with _field_errors("delta/r_max"):
            return AdfParams(
                delta=self.delta, r_max=self.r_max, ts=self.ts, uniform=self.uniform_fast_path
            )

    def ldf_params(self) -> LdfParams:
        with _field_errors("omega0"):
            return LdfParams(omega0=self.omega0, ts=self.ts)

    def red_params(self) -> RedParams:
        with _field_errors("kappa"):
            return RedParams(kappa=self.kappa, ts=self.ts)

    def noise_model(self) -> NoiseModel:
        with _field_errors("noise"):
            return NoiseModel(kind=self.noise, d=self.noise_d, seed=self.seed)

    def reference(self) -> ReferenceSignal:
        with _field_errors("signal"):
            return ReferenceSignal(
                kind=self.signal,
                amplitude=self.amplitude,
                rate=self.rate,
                rate_bound=self.rate_bound,
                omega=self.omega,
                chirp_low=self.chirp_low,
                chirp_high=self.chirp_high,
                duration=self.duration,
            )

    def plant_model(self) -> PlantModel:
        with _field_errors("ts"):
            return PlantModel(
                ts=self.ts, load_offset=self.load_offset, clamp_position=self.clamp_position
            )

    def pid_params(self) -> PidParams:
        with _field_errors("kp/ti/td"):
            return PidParams(
                kp=self.kp, ti=self.ti, td=self.td, gamma=self.gamma, u_min=self.u_min, u_max=self.u_max
            )

    def validate(self) -> "ExperimentConfig":
        """
        Check the whole configuration.

        Raises:
            ConfigError: Naming the offending field and the rule it breaks.
        """
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment: must be one of {', '.join(EXPERIMENT_KINDS)}, got {self.experiment!r}")
        if self.filter not in FILTER_NAMES and not (self.experiment == "frf" and self.filter == "all"):
            raise ConfigError(f"filter: must be one of {', '.join(FILTER_NAMES)}, got {self.filter!r}")
        if not self.ts > 0:
            raise ConfigError(f"ts: must be > 0, got {self.ts}")
        if not self.duration > 0:
            raise ConfigError(f"duration: must be > 0, got {self.duration}")
        if self.transient < 0:
            raise ConfigError(f"transient: must be >= 0, got {self.transient}")
        if self.bins_per_decade < 1:
            raise ConfigError(f"bins_per_decade: must be >= 1, got {self.bins_per_decade}")
        if self.experiment == "frf":
            nyquist = math.pi / self.ts
            if not 0 < self.chirp_low < self.chirp_high < nyquist:
                raise ConfigError(
                    f"chirp_low/chirp_high: need 0 < low < high < pi/ts = {nyquist:g}, "
                    f"got {self.chirp_low}..{self.chirp_high}"
                )
        self.adf_params()
        self.ldf_params()
        self.red_params()
        self.noise_model()
        self.reference()
        if self.experiment == "loop":
            self.plant_model()
            self.pid_params()
        return self


@contextmanager
def _field_errors(field_name: str) -> Iterator[None]:
    """Re-raise parameter validation errors as ConfigError prefixed with the field."""
    try:
        yield
    except (AdfError, DifferentiatorError, SimulationError) as e:
        raise ConfigError(f"{field_name}: {e}") from e


def _parse_value(key: str, raw: Optional[str]) -> Any:
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if raw is None or raw.strip() == "":
        return None
    text = raw.strip()
    kind = types[key]
    try:
        if kind is float:
            return float(text)
        if kind is int:
            return int(text)
        if kind is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if key == "output":
            return Path(text).expanduser()
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from e


def get_config(path: Optional[Path] = None, **overrides: Any) -> ExperimentConfig:
    """
    Resolve the configuration: defaults, then the config file, then
    ADF_LAB_* environment variables, then explicit overrides.
    """
    config = ExperimentConfig.default()
    if path is not None:
        config = ExperimentConfig.from_file(path, config)
    config = ExperimentConfig.from_env(config)
    return config.with_overrides(**overrides)
