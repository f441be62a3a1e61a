"""Experiment configuration: plain ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import difflib
import enum
import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``key`` and ``line`` locate the offending entry."""

    def __init__(self, message, key=None, line=None, source=None):
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        prefix = f"{where} " if where else ""
        if key is not None:
            prefix += f"{key}: "
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class Mode(enum.Enum):
    GALERKIN = "GALERKIN"
    TWO_LEVEL = "TWO_LEVEL"
    CONVERGENCE_STUDY = "CONVERGENCE_STUDY"
    SINGULARITY_STUDY = "SINGULARITY_STUDY"
    COMPARISON = "COMPARISON"


class Fixture(enum.Enum):
    SMOOTH = "SMOOTH"
    NONSMOOTH = "NONSMOOTH"


class Forcing(enum.Enum):
    AUTO = "AUTO"        # manufactured for SMOOTH, zero for NONSMOOTH
    ZERO = "ZERO"
    STEADY = "STEADY"


class Coupling(enum.Enum):
    H_SQUARED = "H_SQUARED"
    EXPLICIT = "EXPLICIT"


AUTO = "AUTO"
SINGULARITY_TIMES = (1 / 64, 1 / 16, 1 / 4, 1.0)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    n_coarse: int
    nu: float = 1.0
    element: str = "MINI"
    fine_levels: int = 3
    coupling: Coupling = Coupling.H_SQUARED
    coupling_level: int | None = None
    t_final: float = 1.0
    dt: float | str = AUTO
    fixture: Fixture = Fixture.SMOOTH
    forcing: Forcing = Forcing.AUTO
    modes: int = 64
    delta: float = 0.5
    sample_times: tuple | None = None
    output_dir: str = "output"
    seed: int = 0
    deterministic: bool = False
    newton_tol: float = 1e-10
    newton_max_iters: int = 25
    check_rates: bool = True
    dump_fields: bool = False
    jobs: int = 1

    def __post_init__(self):
        _validate(self)

    @property
    def times(self) -> tuple:
        """Sample times with defaults filled in."""
        if self.sample_times is not None:
            return self.sample_times
        if self.mode is Mode.SINGULARITY_STUDY:
            return tuple(t for t in SINGULARITY_TIMES if t <= self.t_final)
        return (self.t_final,)

    def auto_dt(self, h: float) -> float:
        """``min(h^2 / 4, t_final / 64)`` rounded down to ``t_final / (64 * 2^j)``
        so that dyadic sample times stay on the grid."""
        if self.dt != AUTO:
            return float(self.dt)
        if self.t_final == 0:
            return 1.0
        n = 64
        while self.t_final / n > h * h / 4.0 * (1 + 1e-12):
            n *= 2
        return self.t_final / n

    def echo(self) -> str:
        """``key = value`` lines that parse back to this config."""
        out = []
        for f in fields(self):
            if f.name == "coupling_level":
                continue
            v = getattr(self, f.name)
            if f.name == "sample_times":
                v = self.times
            if f.name == "coupling" and v is Coupling.EXPLICIT:
                v = f"EXPLICIT {self.coupling_level}"
            out.append(f"{f.name} = {_show(v)}")
        return "\n".join(out) + "\n"


def _show(v):
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_show(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _validate(c: ExperimentConfig):
    def bad(key, msg):
        raise ConfigError(msg, key=key)

    if c.n_coarse < 1:
        bad("n_coarse", f"must be a positive integer, got {c.n_coarse}")
    if not (c.nu > 0 and math.isfinite(c.nu)):
        bad("nu", f"must be positive, got {c.nu}")
    if c.element not in ("MINI", "TAYLOR_HOOD"):
        bad("element", f"must be MINI or TAYLOR_HOOD, got {c.element}")
    if c.fine_levels < 0:
        bad("fine_levels", f"must be nonnegative, got {c.fine_levels}")
    if c.coupling is Coupling.EXPLICIT:
        if c.coupling_level is None or c.coupling_level < 1:
            bad("coupling", "EXPLICIT needs a level k >= 1 (h < H)")
        if c.coupling_level > c.fine_levels:
            bad("coupling", f"level {c.coupling_level} exceeds fine_levels={c.fine_levels}")
    if not (c.t_final >= 0 and math.isfinite(c.t_final)):
        bad("t_final", f"must be nonnegative, got {c.t_final}")
    if c.dt != AUTO and not (isinstance(c.dt, float) and c.dt > 0):
        bad("dt", f"must be positive or AUTO, got {c.dt}")
    if c.modes < 1:
        bad("modes", f"must be positive, got {c.modes}")
    if not 0 < c.delta < 1:
        bad("delta", f"must lie in (0, 1), got {c.delta}")
    if c.sample_times is not None:
        for t in c.sample_times:
            if t < 0 or t > c.t_final * (1 + 1e-12):
                bad("sample_times", f"{t} lies outside [0, t_final={c.t_final}]")
    if c.fixture is Fixture.SMOOTH and c.forcing is not Forcing.AUTO:
        bad("forcing", "the SMOOTH fixture uses its manufactured forcing (AUTO)")
    if c.mode is Mode.COMPARISON and c.fixture is not Fixture.SMOOTH:
        bad("fixture", "COMPARISON needs the closed-form SMOOTH fixture")
    if c.mode is Mode.SINGULARITY_STUDY:
        if c.fixture is not Fixture.NONSMOOTH:
            bad("fixture", "SINGULARITY_STUDY needs the NONSMOOTH fixture")
        if any(t <= 0 for t in c.times):
            bad("sample_times", "singular-weight traces need positive sample times")
    if c.mode in (Mode.CONVERGENCE_STUDY, Mode.SINGULARITY_STUDY) and c.fine_levels < 1:
        bad("fine_levels", "a study needs at least two levels")
    if c.mode in (Mode.TWO_LEVEL, Mode.COMPARISON) and c.fine_levels < 1:
        bad("fine_levels", "the two-level method needs a finer level")
    if not c.newton_tol > 0:
        bad("newton_tol", f"must be positive, got {c.newton_tol}")
    if c.newton_max_iters < 1:
        bad("newton_max_iters", f"must be positive, got {c.newton_max_iters}")
    if c.jobs < 1:
        bad("jobs", f"must be positive, got {c.jobs}")


# ---------------------------------------------------------------------------
# parsing

def _int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _float(s):
    try:
        return float(Fraction(s.strip())) if "/" in s else float(s)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"expected a number, got {s!r}") from None


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _enum(cls):
    def conv(s):
        try:
            return cls(s.strip().upper())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"expected one of {names}, got {s!r}") from None
    return conv


def _element(s):
    v = s.strip().upper().replace("-", "_")
    if v not in ("MINI", "TAYLOR_HOOD"):
        raise ValueError(f"expected MINI or TAYLOR_HOOD, got {s!r}")
    return v


def _dt(s):
    return AUTO if s.strip().upper() == AUTO else _float(s)


def _times(s):
    return tuple(sorted(_float(x) for x in s.split(",") if x.strip()))


def _coupling(s):
    parts = s.split()
    kind = _enum(Coupling)(parts[0])
    if kind is Coupling.H_SQUARED:
        if len(parts) != 1:
            raise ValueError("H_SQUARED takes no level")
        return kind, None
    if len(parts) != 2:
        raise ValueError("EXPLICIT needs a level, e.g. 'EXPLICIT 2'")
    return kind, _int(parts[1])


_PARSERS = {
    "mode": _enum(Mode),
    "n_coarse": _int,
    "nu": _float,
    "element": _element,
    "fine_levels": _int,
    "coupling": _coupling,
    "t_final": _float,
    "dt": _dt,
    "fixture": _enum(Fixture),
    "forcing": _enum(Forcing),
    "modes": _int,
    "delta": _float,
    "sample_times": _times,
    "output_dir": str.strip,
    "seed": _int,
    "deterministic": _bool,
    "newton_tol": _float,
    "newton_max_iters": _int,
    "check_rates": _bool,
    "dump_fields": _bool,
    "jobs": _int,
}
REQUIRED = ("mode", "n_coarse")

# common spellings that should point at a real key
_SYNONYMS = {
    "viscosity": "nu", "kinematic_viscosity": "nu", "reynolds": "nu",
    "time_step": "dt", "timestep": "dt", "step": "dt",
    "final_time": "t_final", "t_end": "t_final", "tmax": "t_final",
    "levels": "fine_levels", "refinements": "fine_levels",
    "n": "n_coarse", "coarse": "n_coarse", "coarse_n": "n_coarse",
    "element_pair": "element", "pair": "element",
    "output": "output_dir", "outdir": "output_dir",
    "times": "sample_times", "samples": "sample_times",
}


def suggest(key: str) -> str | None:
    """Closest known key for a misspelled one, or None."""
    k = key.strip().lower()
    hit = difflib.get_close_matches(k, list(_PARSERS), n=1)
    if hit:
        return hit[0]
    hit = difflib.get_close_matches(k, list(_SYNONYMS), n=1, cutoff=0.7)
    return _SYNONYMS[hit[0]] if hit else None


def _assign(values, lines, key, raw, line, source):
    if key not in _PARSERS:
        hint = suggest(key)
        msg = "unknown key" + (f"; did you mean '{hint}'?" if hint else "")
        raise ConfigError(msg, key=key, line=line, source=source)
    try:
        v = _PARSERS[key](raw)
    except ValueError as exc:
        raise ConfigError(str(exc), key=key, line=line, source=source) from None
    if key == "coupling":
        values["coupling"], values["coupling_level"] = v
    else:
        values[key] = v
    lines[key] = (source, line)


def parse_lines(text: str, source=None, overrides=(), default_mode=None) -> ExperimentConfig:
    """Parse config text; ``overrides`` are extra ``key=value`` strings
    applied afterwards (command-line flags)."""
    values, lines = {}, {}
    if default_mode is not None:
        values["mode"] = Mode(default_mode)
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", line=i, source=source)
        key, val = (x.strip() for x in s.split("=", 1))
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key][1]})",
                              key=key, line=i, source=source)
        _assign(values, lines, key, val, i, source)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, val = (x.strip() for x in item.split("=", 1))
        _assign(values, lines, key, val, None, "command line")
    for key in REQUIRED:
        if key not in values:
            raise ConfigError("required key is missing", key=key, source=source)
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        src, line = lines.get(exc.key, (source, None))
        raise ConfigError(str(exc).split(": ", 1)[-1], key=exc.key,
                          line=line, source=src) from None


def parse_config(path=None, overrides=(), default_mode=None) -> ExperimentConfig:
    """Read a config file (``path=None`` means flags only)."""
    if path is None:
        return parse_lines("", overrides=overrides, default_mode=default_mode)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_lines(p.read_text(), source=str(p), overrides=overrides,
                       default_mode=default_mode)


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
