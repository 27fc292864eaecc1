"""Experiment configuration: pydantic models, ordering checks and the JSON schema."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

ANALYSES = ("times", "blocks", "grow", "nested", "measure-sweep", "synth")
SYSTEMS = ("cat2", "diag3", "skew-nonuniform", "cocycle")
SCHEMA_PATH = Path(__file__).with_name("experiment.schema.json")


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` names the offending field."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemConfig(_Model):
    name: Literal["cat2", "diag3", "skew-nonuniform", "cocycle"] = "cat2"
    x0: Optional[list[float]] = None
    profiles: Optional[list[dict]] = Field(
        None, description="per-block exponent processes (skew-nonuniform, cocycle)")
    block_dims: Optional[list[int]] = None
    coupling: float = 0.0


class SplittingConfig(_Model):
    dims: Optional[list[int]] = Field(None, description="bundle dimensions; default by system")
    settle: int = Field(60, ge=0)


class OrbitConfig(_Model):
    N: int = Field(1000, ge=1, description="forward horizon (steps, or blocks for sweeps)")
    B: int = Field(100, ge=0, description="backward orbit length")
    start: Optional[int] = Field(
        None, description="orbit index where analyses start; default: first settled index")


class Thresholds(_Model):
    log_lambda1: float = 0.9
    log_lambda2: float = 1.9
    gamma1: float = 0.8
    gamma2: float = -0.7
    theta: float = 0.5
    ells: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])


class GrowerConfig(_Model):
    sigma1: float = 2.0
    sigma2: float = 2.0
    a: float = 0.5
    r: float = 0.05
    h: float = 0.005
    chi: float = 2.0
    T_cap: float = 10.0
    N_max: int = 1000
    tol_c1: float = 1e-6
    cert_depth: int = 30
    calibrate: bool = False
    full_run: bool = False
    verify_depth: int = 30


class SynthConfig(_Model):
    length: int = Field(1000, ge=1)
    bound: float = 2.0
    small_value: float = 0.0
    small_fraction: float = Field(0.9, ge=0.0, le=1.0)
    big_value: float = 2.0
    zeta: Optional[float] = Field(None, description="Pliss threshold applied to the sequence")


class Expectation(_Model):
    metric: str
    op: Literal["<=", ">=", "==", "<", ">"]
    value: float


class ExperimentConfig(_Model):
    system: SystemConfig = Field(default_factory=SystemConfig)
    splitting: SplittingConfig = Field(default_factory=SplittingConfig)
    orbit: OrbitConfig = Field(default_factory=OrbitConfig)
    analysis: list[Literal["times", "blocks", "grow", "nested", "measure-sweep", "synth"]] = Field(
        default_factory=list)
    thresholds: Thresholds = Field(default_factory=Thresholds)
    grower: GrowerConfig = Field(default_factory=GrowerConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    samples: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    out: Optional[str] = None
    expectations: list[Expectation] = Field(default_factory=list)

    @model_validator(mode="after")
    def _ordering(self):
        check_ordering(self)
        return self


def check_ordering(cfg: ExperimentConfig):
    t, g = cfg.thresholds, cfg.grower
    sel = set(cfg.analysis)
    if sel & {"times", "grow", "nested"}:
        if not (t.log_lambda1 > 0 and t.log_lambda2 > 0):
            raise ConfigError("need log_lambda1 > 0 and log_lambda2 > 0", "thresholds.log_lambda1")
    if sel & {"blocks", "measure-sweep"}:
        if not t.gamma1 > t.gamma2:
            raise ConfigError(f"need gamma1 > gamma2 (got {t.gamma1} <= {t.gamma2})",
                              "thresholds.gamma1")
        if not t.gamma1 > max(0.0, t.gamma2):
            raise ConfigError("high-density block needs gamma1 > max(0, gamma2)", "thresholds.gamma1")
        if not 0.0 < t.theta <= 1.0:
            raise ConfigError("theta must lie in (0, 1]", "thresholds.theta")
        if not t.ells or min(t.ells) < 1:
            raise ConfigError("ells must be a nonempty list of positive integers", "thresholds.ells")
    if sel & {"grow", "nested"}:
        if not 1.0 < g.sigma1 < math.exp(t.log_lambda1):
            raise ConfigError("need 1 < sigma1 < lambda1", "grower.sigma1")
        if not 1.0 < g.sigma2 < math.exp(t.log_lambda2):
            raise ConfigError("need 1 < sigma2 < lambda2", "grower.sigma2")
        if not 0.0 < g.h < g.r:
            raise ConfigError("need 0 < h < r", "grower.h")
        if g.chi <= 1.0:
            raise ConfigError("certificate rate chi must exceed 1", "grower.chi")
        if g.verify_depth > g.cert_depth:
            raise ConfigError("verify_depth exceeds cert_depth", "grower.verify_depth")
    if "synth" in sel:
        s = cfg.synth
        if not s.small_value < s.big_value <= s.bound:
            raise ConfigError("need small_value < big_value <= bound", "synth.big_value")
        if s.zeta is not None and not s.small_value < s.zeta < s.bound:
            raise ConfigError("need small_value < zeta < bound", "synth.zeta")
    for i, e in enumerate(cfg.expectations):
        head = e.metric.split(".", 1)[0]
        if head not in sel:
            raise ConfigError(f"metric {e.metric!r} belongs to no selected analysis",
                              f"expectations[{i}].metric")


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()


def write_schema(path: Path = SCHEMA_PATH):
    path.write_text(json.dumps(json_schema(), indent=2, sort_keys=True) + "\n")


def load_config(source, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse a config from a path, JSON text or dict; raise ConfigError on any defect."""
    if isinstance(source, dict):
        data = copy.deepcopy(source)
    elif source is None:
        data = {}
    else:
        p = Path(source)
        try:
            data = json.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", str(p)) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", str(p)) from None
        if not isinstance(data, dict):
            raise ConfigError("top level must be an object", str(p))
    for key, val in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = val
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        ctx = err.get("ctx", {}).get("error")
        if isinstance(ctx, ConfigError):
            raise ctx from None
        pointer = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], pointer) from None
