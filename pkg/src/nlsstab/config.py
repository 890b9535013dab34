"""Experiment configuration: a YAML file validated against a strict schema."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .nonlinearity import BUILTINS as NL_BUILTINS
from .hamiltonian import POTENTIAL_KINDS


# run probes may name an exponent instead of a number; resolved against the theory block
SYMBOLIC_EXPONENTS = ("p1", "p2", "2p1")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridCfg(_Strict):
    n: int = 512
    L: float = 96.0

    @field_validator("n")
    @classmethod
    def _even(cls, v):
        if v < 8 or v % 2:
            raise ValueError("n must be an even integer >= 8")
        return v

    @field_validator("L")
    @classmethod
    def _pos(cls, v):
        if not v > 0:
            raise ValueError("L must be positive")
        return v


class PotentialCfg(_Strict):
    kind: str = "gaussian-well"
    depth: float = Field(1.0, ge=0)
    width: float = Field(1.5, gt=0)

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {v!r}; known: {sorted(POTENTIAL_KINDS)}")
        return v


class NonlinearityCfg(_Strict):
    name: str = "cubic"
    alpha: Optional[float] = None
    coeff: float = 1.0

    @model_validator(mode="after")
    def _resolve(self):
        if self.name == "power":
            if self.alpha is None or not self.alpha > 0.5:
                raise ValueError("the 'power' nonlinearity needs alpha > 1/2")
        elif self.name not in NL_BUILTINS:
            raise ValueError(f"unknown nonlinearity {self.name!r}; known: {sorted(NL_BUILTINS) + ['power']}")
        return self


class BranchCfg(_Strict):
    a_min: float = Field(1e-4, gt=0)
    a_max: float = Field(0.2, gt=0)
    ratio: float = Field(1.2, gt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.a_min > self.a_max:
            raise ValueError("a_min must not exceed a_max")
        return self


class PerturbationCfg(_Strict):
    amplitude: float = Field(0.02, ge=0)
    width: float = Field(1.0, gt=0)
    offset: float = Field(1.0, ge=0)     # distance of the packet centre from the origin; direction from the seed


class AbsorberCfg(_Strict):
    enabled: bool = True
    frac: float = Field(0.15, gt=0, lt=0.5)
    strength: float = Field(1.0, gt=0)


class RunCfg(_Strict):
    a0: float = Field(0.1, ge=0)
    perturbation: PerturbationCfg = PerturbationCfg()
    T: float = Field(60.0, gt=0)
    dt: float = Field(0.02, gt=0)
    order: Literal[2, 4] = 2
    sample_every: float = Field(0.1, gt=0)
    probes: list[str] = ["lp:2", "lp:4", "lp:8"]
    absorber: AbsorberCfg = AbsorberCfg()
    checkpoint_every: float = Field(10.0, gt=0)


class FitCfg(_Strict):
    t_min: float = Field(2.0, gt=0)
    t_max: Optional[float] = None        # None: the group-velocity horizon of the perturbation
    tolerance: float = Field(0.15, gt=0)
    model: Literal["pure-power", "power-log"] = "pure-power"


class TheoryCfg(_Strict):
    p0: float = Field(40.0, gt=2)
    q0_prime: Optional[float] = None     # None: 0.95 (4 + 2 alpha2) / (3 + 2 alpha2)


class LinearProbeCfg(_Strict):
    probes: list[str] = ["w:2", "lp:8"]
    width: float = Field(1.0, gt=0)
    T: float = Field(60.0, gt=0)
    dt: float = Field(0.05, gt=0)
    sample_every: float = Field(0.5, gt=0)
    tolerance_weighted: float = 0.2
    tolerance_lp: float = 0.15


class OmegaProbeCfg(_Strict):
    family: Literal["frozen", "rotating"] = "rotating"
    a: float = Field(0.1, ge=0)
    ensemble: int = Field(5, ge=5)
    width: float = Field(1.0, gt=0)
    spread: float = Field(2.0, ge=0)
    T: float = Field(100.0, gt=0)
    dt: float = Field(0.02, gt=0)
    sample_every: float = Field(0.5, gt=0)
    sigma: float = Field(2.0, gt=1)
    tolerance: float = 0.2


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = 0
    grid: GridCfg = GridCfg()
    potential: PotentialCfg = PotentialCfg()
    nonlinearity: NonlinearityCfg = NonlinearityCfg()
    branch: BranchCfg = BranchCfg()
    run: RunCfg = RunCfg()
    fit: FitCfg = FitCfg()
    theory: TheoryCfg = TheoryCfg()
    linear_probe: LinearProbeCfg = LinearProbeCfg()
    omega_probe: OmegaProbeCfg = OmegaProbeCfg()

    @model_validator(mode="after")
    def _cross(self):
        if self.run.a0 > self.branch.a_max:
            raise ValueError(f"run.a0 = {self.run.a0} exceeds branch.a_max = {self.branch.a_max}")
        if self.omega_probe.a > self.branch.a_max:
            raise ValueError(f"omega_probe.a = {self.omega_probe.a} exceeds branch.a_max = {self.branch.a_max}")
        from .evolution import parse_probe
        for p in self.run.probes:
            if p.startswith("lp:") and p[3:] in SYMBOLIC_EXPONENTS:
                continue
            parse_probe(p)
        for p in self.linear_probe.probes:
            kind = p.split(":")[0]
            if kind not in ("w", "lp"):
                raise ValueError(f"linear probe {p!r} must be 'w:SIGMA' or 'lp:P'")
            parse_probe(p)
        return self


def load_config(path: str | Path) -> ExperimentConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return ExperimentConfig.model_validate(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def parse_config_text(text: str) -> ExperimentConfig:
    return ExperimentConfig.model_validate(yaml.safe_load(text) or {})
