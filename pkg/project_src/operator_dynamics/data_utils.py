import logging
import os
import re
from typing import List, Optional

import yaml
from pydantic import Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler

from .src.errors import ConfigError, ContractViolation, NumericalAbort, ResourceExhausted
from .src.partition import MAX_BLOCK_BITS
from .src.sparse_operator import Cadence
from .src.util import parse_angle

config_path = os.path.join(os.path.dirname(__file__), 'config', 'config.yaml')
with open(config_path, 'r') as file:
    config_data = yaml.safe_load(file)

DEFAULTS = config_data["defaults"]
PRESETS = config_data["presets"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_RESOURCES = 4

_ASSIGNMENT = re.compile(r"^(\s*[A-Za-z_][\w-]*)\s*=\s*(.*)$")


class RunConfig(BaseSettings):
    """
    Every free parameter of a run.

    Values come from command-line overrides, then the run config file, then
    ORQA_* environment variables (and .env), then config/config.yaml.
    """
    model_config = SettingsConfigDict(env_prefix="ORQA_", env_file=".env", extra="ignore", validate_default=True)

    preset: Optional[str] = DEFAULTS["preset"]
    circuit_file: Optional[str] = DEFAULTS["circuit_file"]
    geometry: Optional[str] = DEFAULTS["geometry"]
    n_qubits: Optional[int] = DEFAULTS["n_qubits"]
    chain_length: int = Field(DEFAULTS["chain_length"], ge=1)
    theta_x: float = DEFAULTS["theta_x"]
    theta_zz: float = DEFAULTS["theta_zz"]
    layers: int = Field(DEFAULTS["layers"], ge=1)
    epsilon0: float = Field(DEFAULTS["epsilon0"], ge=0.0, lt=1.0)
    cadence: Cadence = DEFAULTS["cadence"]
    workers: int = Field(DEFAULTS["workers"], ge=1)
    block_size_bits: Optional[int] = Field(DEFAULTS["block_size_bits"], ge=1, le=MAX_BLOCK_BITS)
    perturbation_s: int = Field(DEFAULTS["perturbation_s"], ge=1)
    n_jobs: int = DEFAULTS["n_jobs"]
    observable: str = DEFAULTS["observable"]
    readout: str = DEFAULTS["readout"]
    track_coefficients: List[str] = DEFAULTS["track_coefficients"]
    per_gate_readout: bool = DEFAULTS["per_gate_readout"]
    out: str = DEFAULTS["out"]
    histogram_bins: int = Field(DEFAULTS["histogram_bins"], ge=0)
    histogram_floor: float = Field(DEFAULTS["histogram_floor"], gt=0.0, lt=1.0)
    checkpoint_every: int = Field(DEFAULTS["checkpoint_every"], ge=0)
    verify_ownership: bool = DEFAULTS["verify_ownership"]
    min_free_memory_mb: int = Field(DEFAULTS["min_free_memory_mb"], ge=0)
    log_level: str = DEFAULTS["log_level"]
    quiet: bool = DEFAULTS["quiet"]
    bench_workers: List[int] = DEFAULTS["bench_workers"]
    bench_sizes: List[int] = DEFAULTS["bench_sizes"]

    @field_validator("theta_x", "theta_zz", mode="before")
    @classmethod
    def _angle(cls, value):
        try:
            return parse_angle(value)
        except ContractViolation as exc:
            raise ValueError(str(exc)) from exc

    @field_validator("readout")
    @classmethod
    def _readout(cls, value):
        if value not in ("zero-state", "coefficient"):
            raise ValueError(f"readout must be 'zero-state' or 'coefficient', got {value!r}")
        return value

    @field_validator("bench_workers")
    @classmethod
    def _sweep(cls, value):
        if not value or min(value) < 1:
            raise ValueError("bench_workers needs positive worker counts")
        return value

    @model_validator(mode="after")
    def _sources(self):
        if self.circuit_file is None:
            if self.preset not in PRESETS:
                raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)} or set circuit_file")
            if "observable" not in self.model_fields_set:
                self.observable = PRESETS[self.preset]["observable"]
        else:
            if not os.path.exists(self.circuit_file):
                raise ValueError(f"circuit file not found: {self.circuit_file}")
            if self.n_qubits is None:
                raise ValueError("circuit_file needs n_qubits")
        if self.geometry is not None and not os.path.exists(self.geometry):
            raise ValueError(f"geometry file not found: {self.geometry}")
        return self


def read_config_file(path):
    """
    Read a flat run configuration: "key: value" (YAML) or "key = value" lines.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, 'r') as file:
        lines = [_ASSIGNMENT.sub(r"\1: \2", line) for line in file.read().splitlines()]
    try:
        values = yaml.safe_load("\n".join(lines)) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must be a flat key/value mapping")
    nested = [key for key, value in values.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"{path}: nested values are not allowed ({', '.join(nested)})")
    return {str(key).replace("-", "_"): value for key, value in values.items()}


def load_config(path=None, **overrides):
    """
    Build a RunConfig from an optional file plus overrides (None values are ignored).
    """
    values = read_config_file(path) if path else {}
    values.update({key: value for key, value in overrides.items() if value is not None})
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def setup_logging(level="INFO", quiet=False):
    """Console logging through rich, on stderr."""
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=True)
    logging.basicConfig(
        level=logging.WARNING if quiet else level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[handler],
        force=True,
    )


def exit_code_for(error):
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, NumericalAbort):
        return EXIT_NUMERICAL
    if isinstance(error, (ResourceExhausted, MemoryError)):
        return EXIT_RESOURCES
    return EXIT_FAILURE
