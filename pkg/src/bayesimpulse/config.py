"""Versioned run configuration (JSON) and the builders that turn it into objects.

Unknown keys are rejected everywhere.  ``model_hash`` digests the
canonical JSON of the model section, plus the instance literal for
tabular runs, and is stamped on every artifact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bayes import Prior
from .errors import InvalidModelParams
from .model import (
    GainSpec,
    Impulse,
    ModelSpec,
    State,
    make_censored_execution_model,
    make_gaussian_impact_model,
)
from .numerics import GridSpec, build_grids
from .oracle import DiscreteInstance, bundled_instances, load_instance, to_model
from .solver import ComparisonCertificate, SolverSettings

CONFIG_VERSION = 1

Vector = Union[float, list[float]]
Matrix = Union[float, list[list[float]]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DriftCfg(_Strict):
    A: Matrix = 0.0
    b: Vector = 0.0


class DiffusionCfg(_Strict):
    sigma: Matrix = 0.0


class GainCfg(_Strict):
    constant: float = 0.0
    linear: list[float] = Field(default_factory=list)
    quadratic: list[float] = Field(default_factory=list)
    param: float = 0.0
    noise: float = 0.0
    variance_reward: float = 0.0
    late_penalty: float = 0.0


class ActionCfg(_Strict):
    duration: float
    size: list[float]
    label: str = ""


class ModelCfg(_Strict):
    family: Literal["censored_execution", "gaussian_impact", "tabular_instance"]
    horizon: float = 1.0
    dimension: int = 1
    parameters: list[float] = Field(default_factory=list)
    drift: DriftCfg = DriftCfg()
    diffusion: DiffusionCfg = DiffusionCfg()
    gain: GainCfg = GainCfg()
    actions: list[ActionCfg] = Field(default_factory=list)
    terminal_noise_scale: float = 1.0
    order_cost: Optional[Vector] = None
    impact_noise: Optional[float] = None
    instance: Optional[str] = None

    @model_validator(mode="after")
    def _family_fields(self):
        if self.family == "tabular_instance":
            if not self.instance:
                raise ValueError("tabular_instance needs 'instance' (bundled name or JSON path)")
        else:
            if self.instance is not None:
                raise ValueError("'instance' only applies to the tabular_instance family")
            if not self.parameters:
                raise ValueError("'parameters' must list at least one value")
        if self.family != "censored_execution" and self.order_cost is not None:
            raise ValueError("'order_cost' only applies to censored_execution")
        if self.family != "gaussian_impact" and self.impact_noise is not None:
            raise ValueError("'impact_noise' only applies to gaussian_impact")
        return self


class StartCfg(_Strict):
    t: float = 0.0
    x: list[float] = Field(default_factory=lambda: [0.0])


class GridCfg(_Strict):
    level: int = Field(2, ge=0)
    x_min: Vector = -1.0
    x_max: Vector = 1.0
    x_count: Union[int, list[int]] = 21
    simplex_resolution: int = Field(11, ge=2)
    clamp: bool = True


class QuadratureCfg(_Strict):
    kernel_resolution: Optional[int] = Field(None, ge=1)
    hermite: int = Field(5, ge=1)
    substeps: int = Field(4, ge=1)


class SolverCfg(_Strict):
    tie_tol: float = Field(1e-12, ge=0)
    chunk: int = Field(8, ge=1)
    boundary_margin: int = Field(1, ge=0)


class PolicyCfg(_Strict):
    epsilon: float = Field(0.0, ge=0)


class SimulationCfg(_Strict):
    n_paths: int = Field(10000, ge=2)
    seed: int = Field(0, ge=0)
    true_param: Optional[int] = None
    trajectories: int = Field(1, ge=1)


class CertificateCfg(_Strict):
    rho: float
    delta: float
    constant: float = 0.0
    linear: list[float] = Field(default_factory=list)
    quadratic: list[float] = Field(default_factory=list)
    time_rate: float = 0.0

    @model_validator(mode="after")
    def _positive(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        return self


class OutputCfg(_Strict):
    directory: Optional[str] = None


class RunConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    model: ModelCfg
    prior: Optional[list[float]] = None
    start: Optional[StartCfg] = None
    grid: Optional[GridCfg] = None
    quadrature: QuadratureCfg = QuadratureCfg()
    solver: SolverCfg = SolverCfg()
    policy: PolicyCfg = PolicyCfg()
    simulation: SimulationCfg = SimulationCfg()
    certificate: Optional[CertificateCfg] = None
    output: OutputCfg = OutputCfg()


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key or line."""


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        msgs = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            if err["type"] == "extra_forbidden":
                msgs.append(f"{source}: unknown key '{loc}'")
            else:
                msgs.append(f"{source}: {loc or '<root>'}: {err['msg']}")
        raise ConfigError("\n".join(msgs)) from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def resolve_instance(cfg: RunConfig) -> DiscreteInstance:
    name = cfg.model.instance
    bundled = bundled_instances()
    if name in bundled:
        return bundled[name]
    p = Path(name)
    if not p.exists():
        raise ConfigError(f"model.instance: no bundled instance or file named {name!r}")
    try:
        return load_instance(p.read_text())
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"model.instance: {exc}") from None


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def model_hash(cfg: RunConfig) -> str:
    payload = {"model": cfg.model.model_dump(mode="json")}
    if cfg.model.family == "tabular_instance":
        inst = resolve_instance(cfg)
        payload["instance"] = repr(inst)
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def build_model(cfg: RunConfig) -> ModelSpec:
    m = cfg.model
    if m.family == "tabular_instance":
        return to_model(resolve_instance(cfg))
    gain = GainSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.gain.model_dump().items()})
    actions = [Impulse(a.duration, tuple(a.size), a.label) for a in m.actions]
    common = dict(
        horizon=m.horizon,
        dimension=m.dimension,
        drift_A=m.drift.A,
        drift_b=m.drift.b,
        sigma=m.diffusion.sigma,
        gain=gain,
        actions=actions,
        terminal_noise_scale=m.terminal_noise_scale,
    )
    if m.family == "censored_execution":
        return make_censored_execution_model(
            rates=m.parameters, order_cost=0.0 if m.order_cost is None else m.order_cost, **common
        )
    return make_gaussian_impact_model(
        impacts=m.parameters, impact_noise=0.5 if m.impact_noise is None else m.impact_noise, **common
    )


def build_grid(cfg: RunConfig, spec: ModelSpec, level: int | None = None) -> GridSpec:
    g = cfg.grid
    if cfg.model.family == "tabular_instance":
        inst = resolve_instance(cfg)
        lvl = inst.level if level is None else level
        if g is not None and level is None:
            lvl = g.level
        res = inst.simplex_resolution if g is None else g.simplex_resolution
        return build_grids(spec, lvl, x_nodes=[[float(s) for s in inst.states]], simplex_resolution=res)
    g = g or GridCfg()
    return build_grids(
        spec,
        g.level if level is None else level,
        g.x_min,
        g.x_max,
        g.x_count,
        g.simplex_resolution,
        clamp=g.clamp,
    )


def build_start(cfg: RunConfig, spec: ModelSpec):
    if cfg.model.family == "tabular_instance":
        inst = resolve_instance(cfg)
        z = State(float(inst.start[0]), (float(inst.start[1]),))
        m = Prior([float(w) for w in inst.prior])
    else:
        z = State(0.0, (0.0,) * spec.dim)
        m = Prior.uniform(spec.K)
    if cfg.start is not None:
        if len(cfg.start.x) != spec.dim:
            raise ConfigError(f"start.x: expected {spec.dim} values")
        z = State(cfg.start.t, tuple(cfg.start.x))
    if cfg.prior is not None:
        if len(cfg.prior) != spec.K:
            raise ConfigError(f"prior: expected {spec.K} weights")
        m = Prior(cfg.prior)
    return z, m


def build_settings(cfg: RunConfig, threads: int = 1) -> SolverSettings:
    q = cfg.quadrature
    return SolverSettings(
        kernel_resolution=q.kernel_resolution,
        hermite=q.hermite,
        substeps=q.substeps,
        threads=threads,
        chunk=cfg.solver.chunk,
        tie_tol=cfg.solver.tie_tol,
    )


def build_certificate(cfg: RunConfig) -> ComparisonCertificate | None:
    c = cfg.certificate
    if c is None:
        return None
    return ComparisonCertificate(
        rho=c.rho,
        delta=c.delta,
        constant=c.constant,
        linear=tuple(c.linear),
        quadratic=tuple(c.quadratic),
        time_rate=c.time_rate,
    )


def build_all(cfg: RunConfig, level: int | None = None):
    """Model, grid, start state and prior; model errors surface as :class:`ConfigError`."""
    try:
        spec = build_model(cfg)
        grids = build_grid(cfg, spec, level)
        z0, m0 = build_start(cfg, spec)
    except InvalidModelParams as exc:
        raise ConfigError(f"model.{exc.field}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec, grids, z0, m0
