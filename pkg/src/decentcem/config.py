"""Plain-text run configuration.

A config is an INI file. Keys before the first section header belong to
``[run]``. Every key must be known; values are coerced to the type of the
field's default and then range-checked by the owning config class.

Sections::

    [run]      command, env, method, seeds, output_dir, episodes, steps, eval_start, jobs
    [planner]  every PlannerConfig field except ``mode`` (``run.method`` sets it)
    [cem]      shared CEM settings of the 1D task
    [opt1d]    methods, population_sizes, runs, seed_base
    [sweep]    population_sizes, runs, seed_base, methods and the per-method grids
    [oracle]   value-iteration grid, discount, tol, max_iters, steps
    [ablate]   axis, values
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields

from .cem import CemConfig
from .decent import INIT_SCHEMES
from .envs import ENVS
from .exceptions import ConfigError
from .planner import MODES, PlannerConfig

COMMANDS = ("opt1d", "sweep", "plan", "oracle", "ablate", "plot")
METHODS_1D = ("cem", "cem_gmm", "decent_cem")
ABLATION_AXES = ("ensemble_size", "big_network", "policy_control", "init_scheme")
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


@dataclass
class RunSection:
    command: str = "plan"
    env: str = "pendulum"
    method: str = "decent_pets"
    seeds: tuple = DEFAULT_SEEDS
    output_dir: str = "results"
    episodes: int = 30
    steps: int = 0            # 0 means the environment's episode length
    eval_start: str = "reset"  # or "hanging" (pendulum only)
    jobs: int = 1


@dataclass
class Cem1DSection:
    elite_ratio: float = 0.1
    alpha: float = 0.1
    min_variance: float = 1e-3
    max_iters: int = 100
    stall_iters: int = 3
    stall_tol: float = 1e-4


@dataclass
class Opt1DSection:
    methods: tuple = METHODS_1D
    population_sizes: tuple = (100, 200, 500, 1000)
    runs: int = 10
    seed_base: int = 0


@dataclass
class SweepSection:
    methods: tuple = METHODS_1D
    population_sizes: tuple = (100, 200, 500, 1000)
    runs: int = 10
    seed_base: int = 0
    n_components: tuple = (3, 5, 8, 10)
    kappa: tuple = (0.25, 0.5)
    output_modes: tuple = ("s", "m")
    n_instances: tuple = (3, 5, 8, 10)


@dataclass
class OracleSection:
    theta_bins: int = 100
    thetadot_bins: int = 100
    action_bins: int = 50
    discount: float = 0.95
    tol: float = 1e-6
    max_iters: int = 20000
    steps: int = 200


@dataclass
class AblateSection:
    axis: str = "ensemble_size"
    values: tuple = ()


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    cem: Cem1DSection = field(default_factory=Cem1DSection)
    opt1d: Opt1DSection = field(default_factory=Opt1DSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    @property
    def command(self) -> str:
        return self.run.command

    @property
    def seeds(self) -> list:
        return list(self.run.seeds)

    def snapshot(self) -> dict:
        out = {}
        for f in fields(self):
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(getattr(self, f.name)).items()}
        return out


_SECTIONS = {
    "run": RunSection,
    "planner": PlannerConfig,
    "cem": Cem1DSection,
    "opt1d": Opt1DSection,
    "sweep": SweepSection,
    "oracle": OracleSection,
    "ablate": AblateSection,
}
_EXCLUDED = {"planner": {"mode"}}
# fields whose default is None
_OPTIONAL_FLOAT = {("planner", "param_init_variance")}


def _coerce(section, key, raw: str, default):
    raw = raw.strip()
    try:
        if (section, key) in _OPTIONAL_FLOAT:
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [v.strip() for v in raw.split(",") if v.strip()]
            kind = type(default[0]) if default else str
            if kind is str:
                out = []
                for v in items:
                    try:
                        out.append(int(v))
                    except ValueError:
                        out.append(v)
                return tuple(out)
            return tuple(kind(v) for v in items)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _build(section, cls, items: dict):
    known = {f.name: f for f in fields(cls) if f.name not in _EXCLUDED.get(section, ())}
    unknown = sorted(set(items) - set(known))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    defaults = cls()
    values = {k: _coerce(section, k, v, getattr(defaults, k)) for k, v in items.items()}
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`.

    ``overrides`` maps ``"section.key"`` to raw string values applied on top
    of the file (used for command-line flags).
    """
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = sorted(set(parser.sections()) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    raw = {name: dict(parser.items(name)) if parser.has_section(name) else {}
           for name in _SECTIONS}
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        raw[section][key] = value

    parts = {name: _build(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name != "planner"}
    run = parts["run"]
    mode = run.method if run.method in MODES else "decent_pets"
    planner_items = dict(raw["planner"])
    planner = _build("planner", PlannerConfig, planner_items)
    try:
        planner = PlannerConfig(**{**asdict(planner), "mode": mode})
    except ConfigError as exc:
        raise ConfigError(f"[planner] {exc}") from None
    cfg = RunConfig(planner=planner, **parts)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    run = cfg.run
    if run.command not in COMMANDS:
        raise ConfigError(f"[run] command must be one of {COMMANDS}, got {run.command!r}")
    if run.env not in ENVS:
        raise ConfigError(f"[run] env must be one of {sorted(ENVS)}, got {run.env!r}")
    if run.method not in MODES + METHODS_1D:
        raise ConfigError(f"[run] method must be one of {MODES + METHODS_1D}, got {run.method!r}")
    if not run.seeds:
        raise ConfigError("[run] seeds must not be empty")
    if run.episodes < 2:
        raise ConfigError("[run] episodes must be >= 2")
    if run.steps < 0 or run.jobs < 1:
        raise ConfigError("[run] steps must be >= 0 and jobs >= 1")
    if run.eval_start not in ("reset", "hanging"):
        raise ConfigError("[run] eval_start must be 'reset' or 'hanging'")
    if run.eval_start == "hanging" and run.env != "pendulum":
        raise ConfigError("[run] eval_start=hanging needs env=pendulum")
    c = cfg.cem
    try:
        CemConfig(elite_ratio=c.elite_ratio, alpha=c.alpha, min_variance=c.min_variance,
                  max_iters=c.max_iters, stall_iters=c.stall_iters, stall_tol=c.stall_tol)
    except ConfigError as exc:
        raise ConfigError(f"[cem] {exc}") from None
    for name in ("opt1d", "sweep"):
        sec = getattr(cfg, name)
        bad = sorted(set(sec.methods) - set(METHODS_1D))
        if bad:
            raise ConfigError(f"[{name}] unknown methods: {', '.join(map(str, bad))}")
        if sec.runs < 1 or not sec.population_sizes or min(sec.population_sizes) < 1:
            raise ConfigError(f"[{name}] runs and population sizes must be positive")
    o = cfg.oracle
    if min(o.theta_bins, o.thetadot_bins, o.action_bins) < 2:
        raise ConfigError("[oracle] bins must be >= 2")
    if not 0 <= o.discount < 1:
        raise ConfigError("[oracle] discount must lie in [0, 1)")
    a = cfg.ablate
    if a.axis not in ABLATION_AXES:
        raise ConfigError(f"[ablate] axis must be one of {ABLATION_AXES}, got {a.axis!r}")
    if a.axis == "ensemble_size":
        for v in a.values:
            if not isinstance(v, int) or not 1 <= v <= cfg.planner.total_population:
                raise ConfigError("[ablate] ensemble sizes must be integers in [1, total_population]")
    if a.axis == "init_scheme":
        bad = sorted(set(a.values) - set(INIT_SCHEMES))
        if bad:
            raise ConfigError(f"[ablate] unknown init schemes: {', '.join(map(str, bad))}")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = "" if path is None else open(path).read()
    return parse_config(text, overrides)
