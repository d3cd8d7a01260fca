"""Run configuration: schema, defaults, JSON loading and environment overrides.

Precedence, lowest first: built-in defaults, the JSON config file, environment
variables, command-line flags.  Environment keys use the ``TRIBODY_`` prefix
with ``__`` between nesting levels and match field names case-insensitively,
e.g. ``TRIBODY_INTEGRATOR__RTOL=1e-12`` or ``TRIBODY_K=10``.  Values are parsed
as JSON when possible and passed as strings otherwise.
"""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import ConservedPair, MassSystem, derive_mass_constants
from .integrator import IntegratorConfig, PhasePlan

ENV_PREFIX = "TRIBODY_"


class ConfigError(ValueError):
    """Invalid configuration; maps to its own exit code."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class IntegratorSettings(_Model):
    rtol: float = Field(1e-10, gt=0)
    atol: float = Field(1e-12, gt=0)
    first_step: float = Field(0.0, ge=0)
    min_step: float = Field(0.0, ge=0)
    max_step: float = Field(math.inf, gt=0)
    max_steps: int = Field(20_000_000, ge=1)
    root_tol: float = Field(1e-12, gt=0)
    sample_stride: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _steps(self):
        if not self.min_step < self.max_step:
            raise ValueError("min_step must be below max_step")
        return self

    def build(self) -> IntegratorConfig:
        return IntegratorConfig(**self.model_dump())


class PhaseSettings(_Model):
    switch_factor: float = Field(2.0, gt=1)
    escape_factor: float = Field(1.25, gt=1)
    tail_factor: float = Field(1.25, gt=1)
    t_max: float = Field(50.0, gt=0)
    near_grid_dx: float = Field(1e-3, gt=0)
    far_grid_dx: float = Field(1e-3, gt=0)

    def build(self) -> PhasePlan:
        return PhasePlan(**self.model_dump())


class SectionSettings(_Model):
    r0: float | None = Field(None, gt=0, description="section size; None derives it from K")
    shape: list[float] | None = Field(None, min_length=4, max_length=4)
    theta: float = 0.0
    safety: float = Field(0.5, gt=0, lt=1)


ShapeFamily = Literal["tight_binary", "uniform"]


class SearchSettings(_Model):
    family: ShapeFamily = "tight_binary"
    eps_range: tuple[float, float] = (1e-3, 0.1)
    min_separation: float = Field(1e-4, gt=0)
    thetas: list[float] = Field(default_factory=lambda: [0.0, math.pi / 2, math.pi, 3 * math.pi / 2], min_length=1)


class SimulateSettings(_Model):
    initial: Literal["section", "lagrange", "state"] = "section"
    state: list[float] | None = Field(None, description="Jacobi x1, x2, x1dot, x2dot for initial='state'")
    formulation: Literal["jacobi", "mcgehee"] = "jacobi"
    span: float = Field(10.0, ge=0, description="integration span in the formulation's independent variable")
    periods: float = Field(1.0, ge=0, description="span in Lagrange periods for initial='lagrange'")
    grid_dx: float | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _state(self):
        if self.initial == "state" and (self.state is None or len(self.state) != 8):
            raise ValueError("initial='state' needs 8 Jacobi components")
        return self


class VerifySettings(SearchSettings):
    max_shapes: int = Field(64, ge=1)
    csv_max_rows: int = Field(200_000, ge=2)


class ScanSettings(SearchSettings):
    r0: list[float] = Field(default_factory=list, description="section sizes; empty means the auto r0 for K")
    n_shapes: int = Field(25, ge=1)

    @field_validator("r0")
    @classmethod
    def _positive(cls, v):
        if any(not x > 0 for x in v):
            raise ValueError("every r0 must be positive")
        return v


class ExportSettings(_Model):
    inputs: list[str] = Field(default_factory=list)
    max_points: int = Field(2000, ge=2)


class RunConfig(_Model):
    """Complete configuration of one tribody invocation."""

    mode: Literal["simulate", "verify", "scan", "export"] = "simulate"
    masses: tuple[float, float, float] = (1.0, 1.0, 1.0)
    h: float = -1.0
    omega: float = 0.5
    K: float = Field(3.0, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: int | None = Field(None, ge=1)
    out: str = "out"
    integrator: IntegratorSettings = Field(default_factory=IntegratorSettings)
    phases: PhaseSettings = Field(default_factory=PhaseSettings)
    section: SectionSettings = Field(default_factory=SectionSettings)
    simulate: SimulateSettings = Field(default_factory=SimulateSettings)
    verify: VerifySettings = Field(default_factory=VerifySettings)
    scan: ScanSettings = Field(default_factory=ScanSettings)
    export: ExportSettings = Field(default_factory=ExportSettings)

    @field_validator("masses")
    @classmethod
    def _masses(cls, v):
        if any(not (m > 0 and math.isfinite(m)) for m in v):
            raise ValueError("masses must be positive and finite")
        return v

    @model_validator(mode="after")
    def _standing(self):
        if self.omega == 0:
            raise ValueError("omega must be nonzero so that triple collision is impossible")
        if self.mode in ("verify", "scan") and not self.h < 0:
            raise ValueError("verify and scan need negative energy h")
        return self

    @property
    def mass(self) -> MassSystem:
        return derive_mass_constants(*self.masses)

    @property
    def conserved(self) -> ConservedPair:
        return ConservedPair(self.h, self.omega)

    @property
    def worker_count(self) -> int:
        return self.workers or os.cpu_count() or 1


def _match(model: type[BaseModel], key: str) -> str:
    for name in model.model_fields:
        if name.lower() == key.lower():
            return name
    raise ConfigError(f"unknown config key {key!r}")


def _parse(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def env_overrides(environ=None, prefix: str = ENV_PREFIX) -> dict:
    """Nested dict of overrides read from ``prefix``-ed environment variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for var in sorted(environ):
        if not var.startswith(prefix):
            continue
        path = var[len(prefix):].split("__")
        model: type[BaseModel] = RunConfig
        node = out
        for i, part in enumerate(path):
            name = _match(model, part)
            if i == len(path) - 1:
                node[name] = _parse(environ[var])
                break
            sub = model.model_fields[name].annotation
            if not (isinstance(sub, type) and issubclass(sub, BaseModel)):
                raise ConfigError(f"{var}: {name!r} has no nested keys")
            node = node.setdefault(name, {})
            model = sub
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Build and validate a RunConfig from file, environment and explicit overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = _merge(data, env_overrides(environ))
    data = _merge(data, overrides or {})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
