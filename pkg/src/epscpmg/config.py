"""Run configuration: a YAML file checked against a strict schema.

Unknown keys are rejected and every problem is reported with the line it
comes from.  Angles are given in degrees, coupling constants in MHz nm^3
(they are multiplied by 2 pi internally), times in us.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import SchemaError
from .fitting import FitSettings, SurfaceSettings
from .geometry import DensityPair, PhysicsConstants
from .pulses import PulseSequenceSpec


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DegRange(_Strict):
    start: float
    stop: float
    step: float = Field(gt=0)

    def values(self):
        n = int(round((self.stop - self.start) / self.step))
        return self.start + self.step * np.arange(n + 1)


class LogGrid(_Strict):
    min: float = Field(gt=0)
    max: float = Field(gt=0)
    points: int = Field(ge=1)

    def values(self):
        if self.points == 1:
            return np.array([self.min])
        return np.logspace(np.log10(self.min), np.log10(self.max), self.points)


class Physics(_Strict):
    carbon_density: float = Field(176.3, gt=0, description="nm^-3")
    system_prefactor_mhz_nm3: float = Field(13.0, gt=0)
    bath_prefactor_mhz_nm3: float = Field(26.0, gt=0)
    exclusion_radius: float = Field(0.5, gt=0, description="nm")
    bath_threshold: float = Field(1e-4, ge=0, description="rad/us")
    quantization_axis: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kappa: float = Field(50.0, gt=0, description="us ppm")
    tau_c: Optional[float] = Field(None, gt=0, description="us, overrides kappa")

    @field_validator("quantization_axis")
    @classmethod
    def _nonzero(cls, v):
        if not np.linalg.norm(v) > 0:
            raise ValueError("quantization_axis must be non-zero")
        return v

    def constants(self):
        return PhysicsConstants(
            carbon_density=self.carbon_density,
            system_prefactor=2 * np.pi * self.system_prefactor_mhz_nm3,
            bath_prefactor=2 * np.pi * self.bath_prefactor_mhz_nm3,
            exclusion_radius=self.exclusion_radius,
            bath_threshold=self.bath_threshold,
            quantization_axis=tuple(self.quantization_axis),
        )


class Densities(_Strict):
    n_system: float = Field(gt=0, description="ppm")
    n_bath: float = Field(ge=0, description="ppm")


class Simulation(_Strict):
    n_spins: int = Field(6, ge=1, le=12)
    realizations: int = Field(64, ge=2)
    pulse_duration: float = Field(0.04, ge=0, description="us")
    jitter_deg: float = Field(0.0, ge=0)
    threads: int = Field(1, ge=1)
    densities: Densities = Densities(n_system=2.1, n_bath=23.2)


class Sequence(_Strict):
    family: Literal["eps_cpmg", "apcpmg", "hahn_echo", "free_evolution"] = "eps_cpmg"
    n_pulses: list[int] = [2, 5, 10, 20, 30]
    tau: float = Field(0.25, gt=0, description="us")
    epsilon_deg: Union[list[float], DegRange] = DegRange(start=-90, stop=90, step=5)

    @field_validator("n_pulses")
    @classmethod
    def _counts(cls, v):
        if not v or min(v) < 0:
            raise ValueError("n_pulses must be a non-empty list of non-negative integers")
        return sorted(set(v))

    def epsilon_values(self):
        if isinstance(self.epsilon_deg, DegRange):
            return self.epsilon_deg.values()
        return np.asarray(self.epsilon_deg, dtype=float)


class Fit(_Strict):
    grid_n_system: Union[list[float], LogGrid] = LogGrid(min=0.1, max=10, points=7)
    grid_n_bath: Union[list[float], LogGrid] = LogGrid(min=2, max=100, points=7)
    n_min_pulses: int = Field(4, ge=0)
    smoothing_deg: float = Field(6.0, ge=0)
    noise_sigma: float = Field(0.02, ge=0)
    noise_seed: int = 1

    @staticmethod
    def _grid(g):
        vals = g.values() if isinstance(g, LogGrid) else np.asarray(g, dtype=float)
        if vals.size == 0 or np.any(vals <= 0):
            raise ValueError("density grids must be non-empty and positive")
        return vals

    def n_system_values(self):
        return self._grid(self.grid_n_system)

    def n_bath_values(self):
        return self._grid(self.grid_n_bath)


class Output(_Strict):
    dir: str = "out"
    cache_dir: Optional[str] = None


class RunConfig(_Strict):
    seed: int = Field(0, ge=0)
    physics: Physics = Physics()
    simulation: Simulation = Simulation()
    sequence: Sequence = Sequence()
    fit: Fit = Fit()
    output: Output = Output()

    @model_validator(mode="after")
    def _timing(self):
        if not 2 * self.sequence.tau > self.simulation.pulse_duration:
            raise ValueError("simulation.pulse_duration must be shorter than 2 * sequence.tau")
        if self.sequence.family == "hahn_echo" and self.sequence.n_pulses != [1]:
            raise ValueError("hahn_echo needs sequence.n_pulses: [1]")
        return self

    # -- conversions --------------------------------------------------------
    def spec(self):
        return PulseSequenceSpec(
            family=self.sequence.family,
            n_pulses=max(self.sequence.n_pulses),
            tau=self.sequence.tau,
            pulse_duration=self.simulation.pulse_duration,
            jitter_sigma=float(np.deg2rad(self.simulation.jitter_deg)),
        )

    def densities(self):
        d = self.simulation.densities
        return DensityPair(d.n_system, d.n_bath)

    def surface_settings(self):
        return SurfaceSettings(
            spec=self.spec(),
            epsilon_grid=tuple(np.deg2rad(self.sequence.epsilon_values())),
            n_pulses_grid=tuple(self.sequence.n_pulses),
            realizations=self.simulation.realizations,
            master_seed=self.seed,
            n_spins=self.simulation.n_spins,
            constants=self.physics.constants(),
            kappa=self.physics.kappa,
            tau_c=self.physics.tau_c,
        )

    def fit_settings(self):
        return FitSettings(
            surface=self.surface_settings(),
            n_min_pulses=self.fit.n_min_pulses,
            smoothing_sigma=float(np.deg2rad(self.fit.smoothing_deg)),
            threads=self.simulation.threads,
            cache_dir=self.output.cache_dir,
        )

    def canonical(self):
        """Fully resolved configuration as plain JSON-compatible data."""
        return self.model_dump(mode="json")

    def digest(self):
        text = json.dumps(self.canonical(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _key_lines(node, path=(), out=None):
    """Map each key path of a composed YAML tree to its 1-based line number."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (key.value,)
            out[p] = key.start_mark.line + 1
            _key_lines(value, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            p = path + (i,)
            out[p] = item.start_mark.line + 1
            _key_lines(item, p, out)
    return out


def _line_for(loc, lines):
    loc = tuple(loc)
    while loc:
        if loc in lines:
            return lines[loc]
        loc = loc[:-1]
    return None


def parse_config(text, source="<config>"):
    """Validate YAML (or JSON) text into a :class:`RunConfig`.

    A JSON sidecar written next to an output is accepted too: its embedded
    ``config`` block is used, so a run can be reproduced from its sidecar.
    """
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise SchemaError(f"{where}: malformed YAML", [f"{where}: {exc}"]) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{source}: top level must be a mapping", [f"{source}:1: not a mapping"])
    lines = _key_lines(node) if node is not None else {}
    prefix = ()
    if "config" in raw and "tool" in raw:
        raw, prefix = raw["config"], ("config",)
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = prefix + tuple(err["loc"])
            line = _line_for(loc, lines)
            where = f"{source}:{line}" if line is not None else source
            dotted = ".".join(str(p) for p in err["loc"]) or "<root>"
            problems.append(f"{where}: {dotted}: {err['msg']}")
        raise SchemaError(f"{source}: invalid configuration", problems) from exc


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read config {path}: {exc.strerror}", [str(exc)]) from exc
    return parse_config(text, str(path))
