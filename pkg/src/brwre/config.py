"""Run configuration: flat ``key = value`` files merged under command-line flags.

A config file looks like::

    # brwre run configuration
    schema_version = 1
    d = 3
    M = 6
    kind = conductances
    edges = uniform(0.5, 2)
    m_grid = 4, 8, 16, 32

Keys are the long flag names with dashes replaced by underscores.  Values
given on the command line override the file, which overrides the defaults.
The worker count is read from ``BRWRE_WORKERS`` only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

from .environment import DistributionSpec, EnvSpec, InvalidEnvironment
from .genealogy import InvalidLaw, make_law
from .parallel import worker_count

CONFIG_SCHEMA = 1
DEFAULT_EDGES = "uniform(0.5,2)"
DEFAULT_TRAPS = "uniform(0,0.9)"
ENV_KINDS = ("constant", "conductances", "traps", "mixed")


class ConfigError(ValueError):
    """Invalid configuration; carries a list of ``{"field", "message"}`` diagnostics."""

    def __init__(self, diagnostics: list):
        self.diagnostics = diagnostics
        super().__init__("; ".join(f"{d['field']}: {d['message']}" for d in diagnostics))


@dataclass
class RunConfig:
    command: str = ""
    action: str | None = None
    d: int = 3
    M: int | None = None
    kind: str = "constant"
    edges: str | None = None
    traps: str | None = None
    env_file: str | None = None
    env_seed: int | None = None
    law: str = "binary"
    m: int | None = None
    m_grid: list | None = None
    replicates: list = field(default_factory=lambda: [100_000])
    seed: int = 0
    node_cap: int = 10**7
    kill: str = "box"
    R: float = 100.0
    x: list | None = None
    sites: list | None = None
    radii: list | None = None
    m_bounds: list | None = None
    n_envs: int | None = None
    quenched: bool = False
    n_max: int = 200
    route: str = "auto"
    sources: str = "origin"
    steps: int = 2
    scale_check: float | None = None
    out: str | None = None
    csv: str | None = None
    explicit_arrays: bool = True
    z_tol: float = 3.0
    duality_tol: float = 1e-9
    workers: int = 1

    # ------------------------------------------------------------------
    def env_spec(self) -> EnvSpec:
        kind = self.kind
        edges = self.edges if self.edges is not None else (DEFAULT_EDGES if kind in ("conductances", "mixed") else None)
        traps = self.traps if self.traps is not None else (DEFAULT_TRAPS if kind in ("traps", "mixed") else None)
        return EnvSpec(kind, edges, traps)

    def offspring_law(self):
        return make_law(self.law)

    @property
    def reps(self):
        return self.replicates[0] if len(self.replicates) == 1 else list(self.replicates)

    def resolved(self) -> dict:
        out = asdict(self)
        del out["workers"]  # results never depend on the worker count
        out["schema_version"] = CONFIG_SCHEMA
        if self.kind != "constant" or self.edges or self.traps:
            try:
                out["env"] = self.env_spec().describe()
            except InvalidEnvironment:
                pass
        return out


_INT = {"d", "M", "env_seed", "m", "seed", "node_cap", "n_envs", "n_max", "steps"}
_FLOAT = {"R", "scale_check", "z_tol", "duality_tol"}
_INT_LIST = {"m_grid", "replicates", "x", "radii", "m_bounds"}
_BOOL = {"quenched", "explicit_arrays"}
_SITES = {"sites"}
KEYS = {f.name for f in fields(RunConfig)} - {"workers"}


def parse_int_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def parse_sites(text) -> list:
    """``"1,0,0; 0,2,1"`` -> ``[[1,0,0], [0,2,1]]``."""
    if isinstance(text, (list, tuple)):
        return [list(map(int, s)) for s in text]
    return [parse_int_list(part) for part in str(text).split(";") if part.strip()]


def coerce(key: str, value):
    if value is None:
        return None
    if key in _INT:
        return int(value)
    if key in _FLOAT:
        return float(value)
    if key in _INT_LIST:
        return parse_int_list(value)
    if key in _SITES:
        return parse_sites(value)
    if key in _BOOL:
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return str(value).strip()


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; ``schema_version`` is mandatory."""
    diags = []
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                diags.append({"field": f"{path}:{lineno}", "message": "expected key = value"})
                continue
            key, value = (t.strip() for t in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "schema_version":
                values[key] = value
                continue
            if key == "workers":
                diags.append({"field": key, "message": "worker count is set by BRWRE_WORKERS only"})
                continue
            if key not in KEYS:
                diags.append({"field": key, "message": f"unknown key ({path}:{lineno})"})
                continue
            try:
                values[key] = coerce(key, value)
            except ValueError as exc:
                diags.append({"field": key, "message": str(exc)})
    version = values.pop("schema_version", None)
    if version is None:
        diags.append({"field": "schema_version", "message": "missing"})
    elif str(version) != str(CONFIG_SCHEMA):
        diags.append({"field": "schema_version", "message": f"unsupported version {version} (expected {CONFIG_SCHEMA})"})
    if diags:
        raise ConfigError(diags)
    return values


def write_config_file(cfg: RunConfig, path) -> None:
    lines = ["# brwre run configuration", f"schema_version = {CONFIG_SCHEMA}"]
    for key, value in asdict(cfg).items():
        if key == "workers" or value is None:
            continue
        if isinstance(value, list):
            value = "; ".join(",".join(map(str, v)) for v in value) if value and isinstance(value[0], list) else ",".join(map(str, value))
        lines.append(f"{key} = {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def build_config(cli_values: dict, file_values: dict | None = None) -> RunConfig:
    """Merge defaults < file < command line, then validate."""
    merged = {}
    for src in (file_values or {}, cli_values):
        for k, v in src.items():
            if v is not None and k in KEYS:
                merged[k] = v
    diags = []
    for k in list(merged):
        try:
            merged[k] = coerce(k, merged[k])
        except ValueError as exc:
            diags.append({"field": k, "message": str(exc)})
    if diags:
        raise ConfigError(diags)
    cfg = RunConfig(**merged)
    try:
        cfg.workers = worker_count()
    except ValueError as exc:
        raise ConfigError([{"field": "BRWRE_WORKERS", "message": str(exc)}]) from exc
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    diags = []

    def bad(name, msg):
        diags.append({"field": name, "message": msg})

    if cfg.d < 1:
        bad("d", "dimension must be >= 1")
    if cfg.M is not None and cfg.M < 0:
        bad("M", "box radius must be >= 0")
    if cfg.kind not in ENV_KINDS:
        bad("kind", f"must be one of {', '.join(ENV_KINDS)}")
    else:
        try:
            cfg.env_spec()
        except InvalidEnvironment as exc:
            bad("kind/edges/traps", str(exc))
    for name in ("edges", "traps"):
        text = getattr(cfg, name)
        if text is not None:
            try:
                DistributionSpec.parse(text, "edge" if name == "edges" else "trap")
            except InvalidEnvironment as exc:
                bad(name, str(exc))
    try:
        make_law(cfg.law)
    except InvalidLaw as exc:
        bad("law", str(exc))
    if cfg.m is not None:
        if cfg.m < 0:
            bad("m", "must be >= 0")
        elif cfg.M is not None and cfg.m > cfg.M:
            bad("m", f"m={cfg.m} exceeds the box radius M={cfg.M}")
    if cfg.m_grid is not None:
        if any(b <= a for a, b in zip(cfg.m_grid, cfg.m_grid[1:])):
            bad("m_grid", "must be strictly increasing")
        if any(v < 0 for v in cfg.m_grid):
            bad("m_grid", "entries must be >= 0")
    if any(r < 1 for r in cfg.replicates):
        bad("replicates", "must be >= 1")
    if cfg.node_cap < 1:
        bad("node_cap", "must be >= 1")
    if cfg.kill not in ("box", "traps"):
        bad("kill", "must be 'box' or 'traps'")
    if not (cfg.R > 0):
        bad("R", "trap threshold must be positive")
    if cfg.x is not None and len(cfg.x) != cfg.d:
        bad("x", f"site must have {cfg.d} coordinates")
    for s in cfg.sites or []:
        if len(s) != cfg.d:
            bad("sites", f"every site must have {cfg.d} coordinates")
    if cfg.n_max < 0:
        bad("n_max", "must be >= 0")
    if cfg.route not in ("auto", "exact-homogeneous", "box"):
        bad("route", "must be auto, exact-homogeneous or box")
    if cfg.sources not in ("origin", "all"):
        bad("sources", "must be 'origin' or 'all'")
    if cfg.n_envs is not None and cfg.n_envs < 1:
        bad("n_envs", "must be >= 1")
    if not (cfg.z_tol > 0 and math.isfinite(cfg.z_tol)):
        bad("z_tol", "must be positive")
    if not cfg.duality_tol > 0:
        bad("duality_tol", "must be positive")
    if diags:
        raise ConfigError(diags)
