"""Run configuration: JSON schema, defaults, validation and env overrides.

A config file is a JSON object with the blocks below; omitted keys take the
defaults shown.  Any value can be overridden by an environment variable
``KDL_<BLOCK>_<KEY>`` (upper case), e.g. ``KDL_GRID_N_X=1024``; the value is
parsed as JSON and falls back to a plain string.

    {
      "black_hole": {"M": 1.0, "a": 0.0, "Q": 0.0, "x_offset": null},
      "particle":   {"kappa": 0.5, "mass": 0.0, "e": 0.0,
                     "potential": null,          # or {"numerator": [...], "denominator": [...]}
                     "modes": null},             # superpose: [{"kappa": .., "coefficient": [re, im]}]
      "initial":    {"kind": "gaussian_packet", "x0": 0.0, "sigma": 1.0, "k0": 0.0,
                     "theta0": 1.5707963267948966, "theta_width": 0.4, "m": 1,
                     "polarization": [1, 0, 0, 0]},   # entries: number or [re, im]
      "grid":       {"n_x": 2048, "X": 100.0, "n_theta": 64, "m_max": 16},
      "evolution":  {"dt": 0.05, "t_final": 10.0, "snapshot_stride": 10,
                     "boundary_mass_threshold": 0.001, "solver_tol": 1e-13,
                     "solver": "auto", "symmetric": false, "write_snapshots": false},
      "analysis":   {"R": 5.0, "T_list": [25, 50, 100, 200], "L_list": [10, 100, 1000, 10000],
                     "fraction": 0.5, "n_fields": 100, "n_tail_fields": 20,
                     "channels": {"kappas": [-1.5, -0.5, 0.5, 1.5], "mus": [-2, -1, 1, 2], "signs": [1, -1]},
                     "x_shoot": 60.0, "trajectory": null,
                     "r_max": 100.0, "n_r": 50, "dump_eigenfunctions": false},
      "output":     {"directory": "out"},
      "seed": 0
    }
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from kdlab.background import BlackHole, Potential
from kdlab.errors import ParameterError

DEFAULTS: dict = {
    "black_hole": {"M": 1.0, "a": 0.0, "Q": 0.0, "x_offset": None},
    "particle": {"kappa": 0.5, "mass": 0.0, "e": 0.0, "potential": None, "modes": None},
    "initial": {
        "kind": "gaussian_packet", "x0": 0.0, "sigma": 1.0, "k0": 0.0,
        "theta0": 1.5707963267948966, "theta_width": 0.4, "m": 1,
        "polarization": [1, 0, 0, 0],
    },
    "grid": {"n_x": 2048, "X": 100.0, "n_theta": 64, "m_max": 16},
    "evolution": {
        "dt": 0.05, "t_final": 10.0, "snapshot_stride": 10, "boundary_mass_threshold": 1e-3,
        "solver_tol": 1e-13, "solver": "auto", "symmetric": False, "write_snapshots": False,
    },
    "analysis": {
        "R": 5.0, "T_list": [25, 50, 100, 200], "L_list": [10, 100, 1000, 10000],
        "fraction": 0.5, "n_fields": 100, "n_tail_fields": 20,
        "channels": {"kappas": [-1.5, -0.5, 0.5, 1.5], "mus": [-2, -1, 1, 2], "signs": [1, -1]},
        "x_shoot": 60.0, "trajectory": None, "r_max": 100.0, "n_r": 50,
        "dump_eigenfunctions": False,
    },
    "output": {"directory": "out"},
    "seed": 0,
}


# dict-valued settings replaced as a whole rather than merged key by key
OPAQUE = {"channels"}


class ConfigError(ParameterError):
    """Invalid configuration; the message names the offending field."""


def _err(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}")


def _merge(defaults: dict, given: dict, path: str, applied: list) -> dict:
    out = {}
    for key in given:
        if key not in defaults:
            raise _err(f"{path}{key}", "unknown key")
    for key, dval in defaults.items():
        here = f"{path}{key}"
        if key not in given:
            out[key] = copy.deepcopy(dval)
            applied.append(here)
        elif isinstance(dval, dict) and key not in OPAQUE:
            if not isinstance(given[key], dict):
                raise _err(here, "expected an object")
            out[key] = _merge(dval, given[key], here + ".", applied)
        else:
            out[key] = given[key]
    return out


def _env_overrides(data: dict, environ) -> list[str]:
    used = []
    for block, values in data.items():
        if isinstance(values, dict):
            for key in values:
                name = f"KDL_{block}_{key}".upper()
                if name in environ:
                    values[key] = _parse_env(environ[name])
                    used.append(name)
        else:
            name = f"KDL_{block}".upper()
            if name in environ:
                data[block] = _parse_env(environ[name])
                used.append(name)
    unknown = sorted(k for k in environ if k.startswith("KDL_") and k not in used)
    if unknown:
        raise ConfigError(f"{unknown[0]}: environment override matches no config field")
    return used


def _parse_env(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _num(path, v, kind=float, positive=False, nonneg=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _err(path, f"expected a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise _err(path, f"expected an integer, got {v!r}")
    v = kind(v)
    if positive and not v > 0:
        raise _err(path, f"must be positive, got {v}")
    if nonneg and not v >= 0:
        raise _err(path, f"must be non-negative, got {v}")
    return v


def _complex(path, v) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise _err(path, "complex values are [re, im]")
        return complex(_num(path, v[0]), _num(path, v[1]))
    return complex(_num(path, v))


def _half_integer(path, v) -> float:
    v = _num(path, v)
    if abs((v - 0.5) - round(v - 0.5)) > 1e-12:
        raise _err(path, f"kappa must be a half-integer, got {v}")
    return v


@dataclass
class RunConfig:
    data: dict
    defaults_applied: list = field(default_factory=list)
    env_overrides: list = field(default_factory=list)
    source: str | None = None

    def __getitem__(self, block):
        return self.data[block]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # typed views -------------------------------------------------------

    def black_hole(self) -> BlackHole:
        b = self.data["black_hole"]
        return BlackHole(b["M"], b["a"], b["Q"], b["x_offset"])

    def potential(self) -> Potential:
        p = self.data["particle"]
        if p["potential"] is not None:
            return Potential.rational(p["potential"]["numerator"], p["potential"]["denominator"])
        return Potential.standard(p["e"])

    def modes(self) -> list[tuple[float, complex]]:
        modes = self.data["particle"]["modes"]
        if not modes:
            return [(self.data["particle"]["kappa"], 1.0 + 0j)]
        return [(m["kappa"], _complex("particle.modes.coefficient", m["coefficient"])) for m in modes]

    def polarization(self) -> tuple:
        return tuple(_complex("initial.polarization", v) for v in self.data["initial"]["polarization"])


def validate(data: dict) -> None:
    """Field-level checks; raises ConfigError naming the first bad field."""
    b = data["black_hole"]
    M = _num("black_hole.M", b["M"], positive=True)
    a = _num("black_hole.a", b["a"])
    Q = _num("black_hole.Q", b["Q"])
    if b["x_offset"] is not None:
        _num("black_hole.x_offset", b["x_offset"])
    if not a * a + Q * Q < M * M:
        raise _err("black_hole", f"non-extreme condition a^2 + Q^2 < M^2 violated: "
                                 f"a^2 + Q^2 = {a * a + Q * Q:.6g} >= M^2 = {M * M:.6g}")

    p = data["particle"]
    _half_integer("particle.kappa", p["kappa"])
    _num("particle.mass", p["mass"], nonneg=True)
    _num("particle.e", p["e"])
    if p["potential"] is not None:
        pot = p["potential"]
        if not isinstance(pot, dict) or set(pot) != {"numerator", "denominator"}:
            raise _err("particle.potential", "expected {\"numerator\": [...], \"denominator\": [...]}")
        for k in ("numerator", "denominator"):
            if not isinstance(pot[k], list) or not pot[k]:
                raise _err(f"particle.potential.{k}", "expected a non-empty list of coefficients")
            for c in pot[k]:
                _num(f"particle.potential.{k}", c)
    if p["modes"] is not None:
        if not isinstance(p["modes"], list) or not p["modes"]:
            raise _err("particle.modes", "expected a non-empty list")
        seen = set()
        for i, m in enumerate(p["modes"]):
            if not isinstance(m, dict) or set(m) != {"kappa", "coefficient"}:
                raise _err(f"particle.modes[{i}]", "expected {\"kappa\": .., \"coefficient\": ..}")
            k = _half_integer(f"particle.modes[{i}].kappa", m["kappa"])
            if k in seen:
                raise _err(f"particle.modes[{i}].kappa", f"duplicate kappa {k}")
            seen.add(k)
            _complex(f"particle.modes[{i}].coefficient", m["coefficient"])

    ini = data["initial"]
    if ini["kind"] not in ("gaussian_packet", "angular_mode_packet"):
        raise _err("initial.kind", f"expected gaussian_packet or angular_mode_packet, got {ini['kind']!r}")
    for k in ("x0", "k0", "theta0"):
        _num(f"initial.{k}", ini[k])
    _num("initial.sigma", ini["sigma"], positive=True)
    _num("initial.theta_width", ini["theta_width"], positive=True)
    m = _num("initial.m", ini["m"], int)
    if m == 0:
        raise _err("initial.m", "angular index must be nonzero")
    if not isinstance(ini["polarization"], list):
        raise _err("initial.polarization", "expected a list")
    need = 4 if ini["kind"] == "gaussian_packet" else 2
    if len(ini["polarization"]) != need:
        raise _err("initial.polarization", f"{ini['kind']} needs {need} entries")
    for v in ini["polarization"]:
        _complex("initial.polarization", v)

    g = data["grid"]
    if _num("grid.n_x", g["n_x"], int) < 8:
        raise _err("grid.n_x", "must be at least 8")
    _num("grid.X", g["X"], positive=True)
    nt = _num("grid.n_theta", g["n_theta"], int)
    if nt < 8 or nt % 2:
        raise _err("grid.n_theta", f"must be an even integer >= 8, got {nt}")
    mm = _num("grid.m_max", g["m_max"], int)
    if mm < 1 or 2 * mm > nt:
        raise _err("grid.m_max", f"must satisfy 1 <= m_max <= n_theta/2, got {mm}")

    e = data["evolution"]
    _num("evolution.dt", e["dt"], positive=True)
    _num("evolution.t_final", e["t_final"], nonneg=True)
    if _num("evolution.snapshot_stride", e["snapshot_stride"], int) < 1:
        raise _err("evolution.snapshot_stride", "must be at least 1")
    _num("evolution.boundary_mass_threshold", e["boundary_mass_threshold"], positive=True)
    tol = _num("evolution.solver_tol", e["solver_tol"], positive=True)
    if not tol < 1e-8:
        raise _err("evolution.solver_tol", f"must be below 1e-8, got {tol}")
    if e["solver"] not in ("auto", "fixed_point", "gmres", "direct"):
        raise _err("evolution.solver", f"unknown solver {e['solver']!r}")
    for k in ("symmetric", "write_snapshots"):
        if not isinstance(e[k], bool):
            raise _err(f"evolution.{k}", "expected true or false")

    an = data["analysis"]
    _num("analysis.R", an["R"], positive=True)
    for k in ("T_list", "L_list"):
        if not isinstance(an[k], list) or not an[k]:
            raise _err(f"analysis.{k}", "expected a non-empty list")
        for v in an[k]:
            _num(f"analysis.{k}", v, positive=True)
    fr = _num("analysis.fraction", an["fraction"], positive=True)
    if fr > 1:
        raise _err("analysis.fraction", "must lie in (0, 1]")
    for k in ("n_fields", "n_tail_fields", "n_r"):
        if _num(f"analysis.{k}", an[k], int) < 1:
            raise _err(f"analysis.{k}", "must be at least 1")
    _num("analysis.x_shoot", an["x_shoot"], positive=True)
    _num("analysis.r_max", an["r_max"], positive=True)
    ch = an["channels"]
    if not isinstance(ch, dict) or set(ch) != {"kappas", "mus", "signs"}:
        raise _err("analysis.channels", "expected {\"kappas\", \"mus\", \"signs\"}")
    for k in ch["kappas"]:
        _half_integer("analysis.channels.kappas", k)
    for mu in ch["mus"]:
        if _num("analysis.channels.mus", mu, int) == 0:
            raise _err("analysis.channels.mus", "mu must be nonzero")
    for s in ch["signs"]:
        if s not in (1, -1):
            raise _err("analysis.channels.signs", f"signs are +1 or -1, got {s!r}")
    if an["trajectory"] is not None and not isinstance(an["trajectory"], str):
        raise _err("analysis.trajectory", "expected a path string")
    if not isinstance(an["dump_eigenfunctions"], bool):
        raise _err("analysis.dump_eigenfunctions", "expected true or false")

    if not isinstance(data["output"]["directory"], str):
        raise _err("output.directory", "expected a path string")
    seed = _num("seed", data["seed"], int)
    if not 0 <= seed < 2**64:
        raise _err("seed", "must be an unsigned 64-bit integer")


def load_config(source=None, environ=None) -> RunConfig:
    """Read, merge with defaults, apply env overrides and validate.

    ``source`` is a path, a dict or None (all defaults).
    """
    environ = os.environ if environ is None else environ
    path = None
    if source is None:
        given = {}
    elif isinstance(source, dict):
        given = source
    else:
        path = str(source)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        try:
            given = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(given, dict):
        raise ConfigError("config: top level must be a JSON object")
    applied: list[str] = []
    data = _merge(DEFAULTS, given, "", applied)
    used = _env_overrides(data, environ)
    applied = [k for k in applied if f"KDL_{k.replace('.', '_')}".upper() not in used]
    validate(data)
    return RunConfig(data, applied, used, path)


# parse_config is the documented entry point for file-based configs
def parse_config(path) -> RunConfig:
    return load_config(path)
