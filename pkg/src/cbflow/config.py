"""Run configuration: a flat INI file with typed keys, parsed with configparser.

Every key has a default, so an empty file is a valid (flat, 8x8x1x1) config.
Blank values mean "use the rule" where a rule exists (dt, max_iter, active).
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields

from .flow import SCHEMES, VARIANTS, StepPolicy
from .mesh import _STENCILS, Grid
from .oracle import families
from .oracle.families import AnalyticMetricFamily, fourier
from .pressure import SolverOptions

FAMILIES = ("flat", "constant_diagonal", "conformally_flat", "doubly_warped",
            "off_diagonal_perturbation")


class ConfigError(ValueError):
    """Invalid configuration; ``str()`` reads ``line N: section.key: reason``
    (``line ?`` when the key is absent from the text, i.e. a default)."""


@dataclass
class GridSection:
    dim: int = 4
    sizes: tuple[int, ...] = (8, 8, 1, 1)
    periods: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)


@dataclass
class InitialSection:
    family: str = "flat"
    amplitude: float = 0.05
    active: int | None = None
    split: int = 2
    diagonal: tuple[float, ...] = ()
    mode: tuple[int, ...] = ()
    # extra conformal factor e^{2w}: "amp:k1,..,kn:phase; ..."
    conformal: str = ""


@dataclass
class FlowSection:
    s0: float = 0.0
    variant: str = "cbf"
    scheme: str = "rk4"
    c_cfl: float = 0.05
    dt: float | None = None
    t_end: float = math.inf
    max_steps: int | None = 10
    stencil_order: int = 4


@dataclass
class SolverSection:
    tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "none"
    eps_inv: float = 1e-8
    compat_tol: float = 1e-6
    project_kernel: bool = True


@dataclass
class ProjectionSection:
    enabled: bool = True
    tol: float = 1e-8
    max_iter: int = 30


@dataclass
class DiagnosticsSection:
    cadence: int = 1
    m_max: int = 2
    K: float = math.inf
    margin_floor: float = 1e-8


@dataclass
class OutputSection:
    dir: str = "out"
    checkpoint_interval: int = 0
    dump_fields: bool = False


@dataclass
class RunSection:
    seed: int = 12345


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    initial: InitialSection = field(default_factory=InitialSection)
    flow: FlowSection = field(default_factory=FlowSection)
    solver: SolverSection = field(default_factory=SolverSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    output: OutputSection = field(default_factory=OutputSection)
    run: RunSection = field(default_factory=RunSection)

    # -- serialization -------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                           interpolation=None)
        parser.optionxform = str  # keep key case (K)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"syntax: {exc}") from exc
        try:
            return cls._from_parser(parser)
        except ConfigError as exc:
            raise ConfigError(f"line {_locate(text, str(exc))}: {exc}") from exc

    @classmethod
    def _from_parser(cls, parser) -> "RunConfig":
        cfg = cls()
        known = {f.name for f in fields(cls)}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"{section}: unknown section")
            target = getattr(cfg, section)
            types = {f.name: f.type for f in fields(target)}
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"{section}.{key}: unknown key")
                try:
                    setattr(target, key, _parse(types[key], raw.strip()))
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for sec in fields(self):
            obj = getattr(self, sec.name)
            parser[sec.name] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    # -- validation and builders --------------------------------------------
    def validate(self) -> None:
        g = self.grid
        if g.dim < 4:
            raise ConfigError("grid.dim: must be >= 4")
        if len(g.sizes) != g.dim:
            raise ConfigError(f"grid.sizes: expected {g.dim} entries, got {len(g.sizes)}")
        if len(g.periods) != g.dim:
            raise ConfigError(f"grid.periods: expected {g.dim} entries, got {len(g.periods)}")
        try:
            Grid(g.sizes, g.periods)
        except ValueError as exc:
            raise ConfigError(f"grid.sizes: {exc}") from exc
        ini = self.initial
        if ini.family not in FAMILIES:
            raise ConfigError(f"initial.family: must be one of {', '.join(FAMILIES)}")
        if ini.active is not None and not 1 <= ini.active <= g.dim:
            raise ConfigError("initial.active: must lie in 1..dim")
        if ini.family == "constant_diagonal" and (
                len(ini.diagonal) != g.dim or min(ini.diagonal) <= 0):
            raise ConfigError("initial.diagonal: need dim positive entries")
        if ini.family == "off_diagonal_perturbation" and not abs(ini.amplitude) < 1:
            raise ConfigError("initial.amplitude: |amplitude| < 1 required for SPD")
        if ini.mode and len(ini.mode) != g.dim:
            raise ConfigError("initial.mode: expected dim entries")
        if ini.family == "doubly_warped" and not 0 < ini.split < g.dim:
            raise ConfigError("initial.split: must lie strictly between 0 and dim")
        try:
            self.conformal_modes()
        except ValueError as exc:
            raise ConfigError(f"initial.conformal: {exc}") from exc
        f = self.flow
        if f.variant not in VARIANTS:
            raise ConfigError(f"flow.variant: must be one of {', '.join(VARIANTS)}")
        if f.scheme not in SCHEMES:
            raise ConfigError(f"flow.scheme: must be one of {', '.join(SCHEMES)}")
        if not (f.c_cfl > 0 and math.isfinite(f.c_cfl)):
            raise ConfigError("flow.c_cfl: must be positive")
        if f.dt is not None and not f.dt > 0:
            raise ConfigError("flow.dt: must be positive or blank")
        if not f.t_end > 0:
            raise ConfigError("flow.t_end: must be positive")
        if f.max_steps is not None and f.max_steps < 0:
            raise ConfigError("flow.max_steps: must be >= 0 or blank")
        if f.max_steps is None and math.isinf(f.t_end):
            raise ConfigError("flow.max_steps: blank max_steps needs a finite t_end")
        if f.stencil_order not in _STENCILS:
            raise ConfigError(f"flow.stencil_order: must be one of {sorted(_STENCILS)}")
        s = self.solver
        if not s.tol > 0:
            raise ConfigError("solver.tol: must be positive")
        if s.preconditioner not in ("none", "jacobi"):
            raise ConfigError("solver.preconditioner: must be none or jacobi")
        if s.max_iter is not None and s.max_iter < 1:
            raise ConfigError("solver.max_iter: must be >= 1 or blank")
        if not self.projection.tol > 0:
            raise ConfigError("projection.tol: must be positive")
        d = self.diagnostics
        if d.cadence < 1:
            raise ConfigError("diagnostics.cadence: must be >= 1")
        if not 0 <= d.m_max <= 2:
            raise ConfigError("diagnostics.m_max: must be 0, 1 or 2")
        if not d.K > 0:
            raise ConfigError("diagnostics.K: must be positive")
        if self.output.checkpoint_interval < 0:
            raise ConfigError("output.checkpoint_interval: must be >= 0")

    def make_grid(self) -> Grid:
        return Grid(self.grid.sizes, self.grid.periods)

    def conformal_modes(self):
        out = []
        for chunk in filter(None, (c.strip() for c in self.initial.conformal.split(";"))):
            parts = chunk.split(":")
            if len(parts) != 3:
                raise ValueError(f"mode {chunk!r} is not amp:k1,..,kn:phase")
            k = tuple(int(x) for x in parts[1].split(","))
            if len(k) != self.grid.dim:
                raise ValueError(f"mode {chunk!r} needs {self.grid.dim} wavenumbers")
            out.append((float(parts[0]), k, float(parts[2])))
        return out

    def make_family(self) -> AnalyticMetricFamily:
        ini, n, L = self.initial, self.grid.dim, tuple(self.grid.periods)
        if ini.family == "flat":
            fam = families.flat(n, L)
        elif ini.family == "constant_diagonal":
            fam = AnalyticMetricFamily("constant_diagonal", n, L, diagonal=tuple(ini.diagonal))
        elif ini.family == "conformally_flat":
            fam = families.conformally_flat(n, ini.amplitude, L, ini.active)
        elif ini.family == "doubly_warped":
            fam = families.doubly_warped(n, ini.amplitude, L, ini.active, ini.split)
        else:
            fam = families.off_diagonal(n, ini.amplitude, L, tuple(ini.mode) or None)
        modes = self.conformal_modes()
        if modes:
            fam = fam.with_conformal(fourier(L, *modes))
        return fam

    def solver_options(self) -> SolverOptions:
        s = self.solver
        return SolverOptions(tol=s.tol, max_iter=s.max_iter, project_kernel=s.project_kernel,
                             preconditioner=s.preconditioner, eps_inv=s.eps_inv,
                             compat_tol=s.compat_tol, stencil_order=self.flow.stencil_order,
                             probe_seed=self.run.seed)

    def step_policy(self) -> StepPolicy:
        f = self.flow
        return StepPolicy(scheme=f.scheme, c_cfl=f.c_cfl, t_end=f.t_end, max_steps=f.max_steps,
                          dt=f.dt, stencil_order=f.stencil_order, solver=self.solver_options())


def _locate(text: str, message: str) -> str:
    where = message.split(":", 1)[0]
    section, _, key = where.partition(".")
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current == section and not key:
                return str(lineno)
        elif current == section and key and stripped.split("=", 1)[0].strip() == key:
            return str(lineno)
    return "?"


# -- typed values ------------------------------------------------------------------

def _parse(tp: str, raw: str):
    optional = "None" in tp
    if optional and raw == "":
        return None
    base = tp.replace(" | None", "")
    if base == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if base == "int":
        return int(raw)
    if base == "float":
        return float(raw)
    if base == "str":
        return raw
    if base.startswith("tuple["):
        item = int if "int" in base else float
        return tuple(item(x) for x in raw.replace(",", " ").split())
    raise TypeError(f"unsupported config type {tp}")


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)
