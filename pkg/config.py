# config.py
"""
Run configuration: a JSON document with three sections, overridable from the
environment as POPFLOW_<SECTION>__<KEY>=<json value>.
"""

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Mapping

from constants import DEFAULT_EXPONENTS, ENV_PREFIX, MSG_NEED_T, VARIANTS
from em_driver import EmConfig
from errors import SchemaError, StorageError
from simulator import SimConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimulationSection:
    grid_w: int = 30
    n_particles: int = 1000
    T: int = 10
    theta: tuple = (3.0, 5.0, 5.0, 10.0)
    force_dir: tuple = (1.0, 0.0)
    destination: tuple | None = None
    sensor_layout: str = "lattice"
    sensors_per_side: int = 8
    decay_len: float = 1.5
    attribution: str = "nearest"
    n_replicas: int = 1
    seed: int = 0


@dataclass(frozen=True)
class EstimationSection:
    variant: str = "istc"
    eps: float = 1.0
    grid_w: int | None = None  # None: square grid inferred from the observation file
    emission_scale: float | None = None  # sigma of the emission cost in cells; None: from the sensor geometry
    outer_iters: int = 30
    outer_tol: float = 1e-5
    init_cost: str = "squared_distance"
    init_step_cost: float | None = None
    mstep_marginals: str = "observed"  # observed | hidden
    sbp_tol: float = 1e-8
    max_sweeps: int = 10_000
    log_domain: bool | None = None
    sym_tol: float = 1e-8
    sym_max_iters: int = 5000
    exponents: tuple = DEFAULT_EXPONENTS
    gamma: float = 1e-3
    ista_tol: float = 1e-8
    ista_max_iters: int = 20_000
    single_pass: bool = False
    stagnation_patience: int = 5
    workers: int = 1


@dataclass(frozen=True)
class EvaluationSection:
    neighbors: str = "moore"  # moore | full
    stay: bool = False  # also report the STAY baseline


@dataclass(frozen=True)
class RunConfig:
    simulation: SimulationSection = field(default_factory=SimulationSection)
    estimation: EstimationSection = field(default_factory=EstimationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "simulation": SimulationSection,
    "estimation": EstimationSection,
    "evaluation": EvaluationSection,
}


def _coerce(section: str, name: str, value, default):
    """Check a value against the type of its default and normalize lists to tuples."""
    where = f"{section}.{name}"
    if isinstance(value, list):
        value = tuple(value)
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SchemaError(f"{where} must be a boolean, got {value!r}", key=where)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{where} must be an integer, got {value!r}", key=where)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{where} must be a number, got {value!r}", key=where)
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise SchemaError(f"{where} must be a string, got {value!r}", key=where)
    elif isinstance(default, tuple):
        if not isinstance(value, tuple):
            raise SchemaError(f"{where} must be a list, got {value!r}", key=where)
    return value


def _build_section(section: str, values: Mapping):
    cls = SECTIONS[section]
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise SchemaError(f"unknown key {section}.{unknown[0]}", key=f"{section}.{unknown[0]}")
    defaults = cls()
    kwargs = {name: _coerce(section, name, value, getattr(defaults, name)) for name, value in values.items()}
    return cls(**kwargs)


def _env_overrides(env: Mapping) -> dict:
    overrides = {}
    for key, raw in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):]
        if "__" not in rest:
            continue
        section, name = rest.split("__", 1)
        section, name = section.lower(), name.lower()
        if section not in SECTIONS:
            raise SchemaError(f"unknown config section in {key}", key=key)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings such as POPFLOW_ESTIMATION__VARIANT=ista
        overrides.setdefault(section, {})[name] = value
        logger.debug(f"Config override from environment: {section}.{name}={value!r}")
    return overrides


def validate(cfg: RunConfig) -> RunConfig:
    sim, est, ev = cfg.simulation, cfg.estimation, cfg.evaluation
    if sim.T < 2:
        raise SchemaError(MSG_NEED_T, key="simulation.T")
    if sim.grid_w < 1 or sim.n_particles < 1:
        raise SchemaError("simulation.grid_w and simulation.n_particles must be positive")
    if len(sim.theta) != 4:
        raise SchemaError("simulation.theta must hold 4 numbers", key="simulation.theta")
    if not sim.decay_len > 0:
        raise SchemaError("simulation.decay_len must be positive", key="simulation.decay_len")
    if est.variant not in VARIANTS:
        raise SchemaError(f"estimation.variant must be one of {sorted(VARIANTS)}, got {est.variant!r}",
                          key="estimation.variant")
    if not est.eps > 0:
        raise SchemaError(f"estimation.eps must be positive, got {est.eps}", key="estimation.eps")
    if est.emission_scale is not None and not est.emission_scale > 0:
        raise SchemaError("estimation.emission_scale must be positive", key="estimation.emission_scale")
    if est.outer_iters < 1:
        raise SchemaError("estimation.outer_iters must be >= 1", key="estimation.outer_iters")
    if est.mstep_marginals not in ("observed", "hidden"):
        raise SchemaError(f"estimation.mstep_marginals must be 'observed' or 'hidden', got {est.mstep_marginals!r}",
                          key="estimation.mstep_marginals")
    if ev.neighbors not in ("moore", "full"):
        raise SchemaError(f"evaluation.neighbors must be 'moore' or 'full', got {ev.neighbors!r}",
                          key="evaluation.neighbors")
    return cfg


def build_run_config(doc: Mapping | None = None, env: Mapping | None = None,
                     overrides: Mapping | None = None) -> RunConfig:
    """Defaults < document < environment < explicit overrides ({section: {key: value}})."""
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise SchemaError(f"unknown key {unknown[0]}", key=unknown[0])

    merged = {}
    for layer in (doc, _env_overrides(env or {}), overrides or {}):
        for section, values in layer.items():
            if not isinstance(values, Mapping):
                raise SchemaError(f"section {section} must be an object", key=section)
            merged.setdefault(section, {}).update(values)

    sections = {name: _build_section(name, merged.get(name, {})) for name in SECTIONS}
    return validate(RunConfig(**sections))


def load_run_config(path=None, env: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    env = os.environ if env is None else env
    doc = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except FileNotFoundError as e:
            raise StorageError(f"config file not found: {path}", path=str(path)) from e
        except OSError as e:
            raise StorageError(f"cannot read config {path}: {e}", path=str(path)) from e
        except json.JSONDecodeError as e:
            raise SchemaError(f"config {path} is not valid JSON: {e}", path=str(path)) from e
        if not isinstance(doc, dict):
            raise SchemaError(f"config {path} must hold a JSON object", path=str(path))
    return build_run_config(doc, env, overrides)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def to_sim_config(section: SimulationSection) -> SimConfig:
    return SimConfig(
        grid_w=section.grid_w,
        n_particles=section.n_particles,
        T=section.T,
        theta=tuple(section.theta),
        force_dir=tuple(section.force_dir),
        destination=None if section.destination is None else tuple(section.destination),
        sensor_layout=section.sensor_layout,
        sensors_per_side=section.sensors_per_side,
        decay_len=section.decay_len,
        attribution=section.attribution,
        n_replicas=section.n_replicas,
        rng_seed=section.seed,
    )


def to_em_config(section: EstimationSection, seed: int = 0) -> EmConfig:
    return EmConfig(
        variant=section.variant,
        eps=section.eps,
        outer_iters=section.outer_iters,
        outer_tol=section.outer_tol,
        init_cost=section.init_cost,
        init_step_cost=section.init_step_cost,
        mstep_marginals=section.mstep_marginals,
        seed=seed,
        sbp_tol=section.sbp_tol,
        max_sweeps=section.max_sweeps,
        log_domain=section.log_domain,
        sym_tol=section.sym_tol,
        sym_max_iters=section.sym_max_iters,
        exponents=tuple(section.exponents),
        gamma=section.gamma,
        ista_tol=section.ista_tol,
        ista_max_iters=section.ista_max_iters,
        single_pass=section.single_pass,
        stagnation_patience=section.stagnation_patience,
        workers=section.workers,
    )
