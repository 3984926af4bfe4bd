"""Run configuration: TOML parsing, validation and object construction."""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import spectral as sp
from .action import ActionProblem, BallTarget, LevelTarget, RunningMax, TerminalL2, TerminalMode
from .experiments import EventSpec, Setup, random_field
from .model import ModelParams, PhysicalConstants, QGModel, derive_params
from .noise import NoiseSpec
from .spectral import GridSpec, LayeredField

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "DEFAULTS"]


class ConfigError(ValueError):
    """Invalid configuration; names the key and, when known, its line."""

    def __init__(self, key: str, message: str, line: int | None = None):
        where = f" (line {line})" if line else ""
        super().__init__(f"{key}{where}: {message}")
        self.key = key
        self.line = line


DEFAULTS: dict = {
    "grid": {"N": 32, "L": math.pi, "dealias": 1.5},
    "model": {"F1": 1.0, "F2": 1.0, "nu": 0.05, "beta": 0.0, "r": 0.0, "barotropic_limit": False, "jacobian": True},
    "physical": {"f0": None, "g": None, "h1": None, "h2": None, "rho0": None, "rho1": None, "rho2": None, "nu": None, "beta": 0.0},
    "forcing": {"amplitude": 0.0, "kx": 1, "ky": 1},
    "noise": {
        "c": 1.0, "s": 1.5, "m": "auto", "kind": "additive", "a": 1.0, "b": 0.0,
        "layers": [True, True], "tilde_kind": None, "tilde_a": None, "tilde_b": None,
    },
    "time": {"T": 1.0, "dt": "auto", "n_steps": None, "snapshot_every": 0, "scheme": "euler"},
    "run": {"seed": 0, "stream": "noise", "out": "run", "eps": 0.1, "n_paths": 1000, "traj_id": 0},
    "initial": {"kind": "zero", "amplitude": 1.0, "kx": 1, "ky": 1, "layer": 0, "slope": 3.0, "seed": 0, "path": None},
    "action": {
        "n_t": None, "target": "level", "observable": "mode", "layer": 0, "kx": 1, "ky": 1,
        "tau": 1.0, "direction": ">=", "rho": 0.0, "q_star_path": None,
        "mu0": 1.0, "M": None, "max_iter": 2000, "tol": None,
    },
    "study": {
        "eps_grid": [0.5, 0.3, 0.2], "method": "is", "tol": None, "levels": [2, 3, 4, 5, 6, 7, 8],
        "bound": "inf", "conventional": False,
    },
}

_SECTION = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _locate(text: str | None, section: str, key: str | None) -> int | None:
    """Line number of ``key`` inside ``[section]`` (or of the section header)."""
    if not text:
        return None
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION.match(line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        m = _KEY.match(line)
        if m and current == section and m.group(1) == key:
            return no
    return None


@dataclass
class RunConfig:
    """Validated configuration with defaults merged in."""

    data: dict
    given: dict = field(default_factory=dict)
    text: str | None = None

    def line(self, section: str, key: str | None = None) -> int | None:
        return _locate(self.text, section, key)

    def error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(f"{section}.{key}", message, self.line(section, key))

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    # -- derived objects ---------------------------------------------------

    def grid(self) -> GridSpec:
        g = self.data["grid"]
        try:
            return GridSpec(int(g["N"]), float(g["L"]), g["dealias"])
        except (ValueError, TypeError) as exc:
            raise self.error("grid", "N", str(exc)) from None

    def forcing(self, grid: GridSpec) -> LayeredField | None:
        f = self.data["forcing"]
        if not f["amplitude"]:
            return None
        return LayeredField.mode(grid, int(f["kx"]), int(f["ky"]), 0, float(f["amplitude"]))

    def params(self, grid: GridSpec) -> ModelParams:
        forcing = self.forcing(grid)
        if "physical" in self.given:
            p = self.data["physical"]
            for key in ("f0", "g", "h1", "h2", "rho0", "rho1", "rho2", "nu"):
                if p[key] is None:
                    raise self.error("physical", key, "missing required key")
            try:
                pc = PhysicalConstants(**{k: float(p[k]) for k in ("f0", "g", "h1", "h2", "rho0", "rho1", "rho2", "nu")})
            except ValueError as exc:
                key = "rho2" if "stratification" in str(exc) else str(exc).split()[0]
                raise self.error("physical", key, str(exc)) from None
            return derive_params(pc, float(p["beta"]), forcing)
        m = self.data["model"]
        try:
            return ModelParams(
                F1=float(m["F1"]), F2=float(m["F2"]), nu=float(m["nu"]), beta=float(m["beta"]),
                r=float(m["r"]), forcing=forcing, barotropic_limit=bool(m["barotropic_limit"]),
                jacobian=bool(m["jacobian"]),
            )
        except ValueError as exc:
            msg = str(exc)
            key = next((k for k in ("F1", "F2", "nu", "beta", "r") if msg.startswith(k) or f" {k}" in msg), "F1")
            raise self.error("model", key, msg) from None

    def model(self) -> QGModel:
        grid = self.grid()
        scheme = self.data["time"]["scheme"]
        if scheme not in ("euler", "pc"):
            raise self.error("time", "scheme", f"unknown scheme {scheme!r}")
        return QGModel(grid, self.params(grid), scheme)

    def noise(self) -> NoiseSpec:
        n = self.data["noise"]
        m = n["m"]
        if m == "auto":
            m = None
        elif m == "inf":
            m = math.inf
        tilde = None
        if n["tilde_kind"] is not None:
            tilde = (
                n["tilde_kind"],
                float(n["a"] if n["tilde_a"] is None else n["tilde_a"]),
                float(n["b"] if n["tilde_b"] is None else n["tilde_b"]),
            )
        c = n["c"]
        try:
            return NoiseSpec(
                c=tuple(c) if isinstance(c, list) else float(c), s=float(n["s"]), m=m, kind=n["kind"],
                a=float(n["a"]), b=float(n["b"]), layers=tuple(n["layers"]), tilde=tilde,
            )
        except ValueError as exc:
            msg = str(exc)
            key = "m" if "trace" in msg or "noise.m" in msg else "kind" if "kind" in msg else "c" if "amplitude" in msg else "a"
            raise self.error("noise", key, msg) from None

    def initial(self, grid: GridSpec) -> np.ndarray:
        ini = self.data["initial"]
        kind = ini["kind"]
        if kind == "zero":
            return np.zeros((2,) + grid.shape)
        if kind == "mode":
            return LayeredField.mode(grid, int(ini["kx"]), int(ini["ky"]), int(ini["layer"]), float(ini["amplitude"])).coeffs.copy()
        if kind == "random":
            c = random_field(grid, np.random.default_rng(int(ini["seed"])), float(ini["slope"]))
            return float(ini["amplitude"]) * c / math.sqrt(float(sp.l2_sq(grid, c).sum()))
        if kind == "snapshot":
            if not ini["path"]:
                raise self.error("initial", "path", "snapshot initial condition needs a path")
            data, g, _ = sp.read_snapshot(ini["path"])
            if (g.N, g.L) != (grid.N, grid.L):
                raise sp.GridMismatchError("initial snapshot grid differs from the configured grid")
            return data
        raise self.error("initial", "kind", f"unknown initial condition {kind!r}")

    def resolve_time(self, model: QGModel, xi) -> tuple[float, int]:
        """Fix ``dt`` and ``n_steps`` before any stepping; stores both back."""
        t = self.data["time"]
        T = float(t["T"])
        if not T > 0:
            raise self.error("time", "T", "T must be positive")
        if t["n_steps"] is not None:
            n = int(t["n_steps"])
            if n < 1:
                raise self.error("time", "n_steps", "must be >= 1")
        elif t["dt"] == "auto":
            dt = model.suggest_dt(xi, dt_max=T / 64)
            n = max(1, math.ceil(T / dt - 1e-9))
        else:
            dt = float(t["dt"])
            if not dt > 0:
                raise self.error("time", "dt", "dt must be positive or 'auto'")
            n = max(1, math.ceil(T / dt - 1e-9))
        t["n_steps"] = n
        t["dt"] = T / n
        return T / n, n

    def setup(self) -> Setup:
        model = self.model()
        xi = self.initial(model.grid)
        _, n = self.resolve_time(model, xi)
        run = self.data["run"]
        return Setup(model, self.noise(), xi, float(self.data["time"]["T"]), n, int(run["seed"]), str(run["stream"]))

    def observable(self):
        a = self.data["action"]
        kind = a["observable"]
        if kind == "mode":
            return TerminalMode(int(a["layer"]), int(a["kx"]), int(a["ky"]))
        if kind == "max":
            return RunningMax(int(a["layer"]), int(a["kx"]), int(a["ky"]))
        if kind == "l2":
            return TerminalL2()
        raise self.error("action", "observable", f"unknown observable {kind!r}")

    def event(self) -> EventSpec:
        a = self.data["action"]
        return EventSpec(self.observable(), float(a["tau"]), a["direction"])

    def problem(self, setup: Setup) -> ActionProblem:
        a = self.data["action"]
        n_t = int(a["n_t"]) if a["n_t"] is not None else setup.n_steps + 1
        if a["target"] == "level":
            target = LevelTarget(self.observable(), float(a["tau"]), a["direction"])
        elif a["target"] == "ball":
            if not a["q_star_path"]:
                raise self.error("action", "q_star_path", "ball target needs a terminal-state snapshot")
            q_star, _, _ = sp.read_snapshot(a["q_star_path"])
            target = BallTarget(q_star, float(a["rho"]))
        else:
            raise self.error("action", "target", f"unknown target {a['target']!r}")
        try:
            return ActionProblem(
                setup.model, setup.basis, setup.xi, setup.T, n_t, target, float(a["mu0"]),
                None if a["M"] is None else float(a["M"]), int(a["max_iter"]),
                None if a["tol"] is None else float(a["tol"]),
            )
        except ValueError as exc:
            raise self.error("action", "mu0", str(exc)) from None

    def echo(self) -> dict:
        out = copy.deepcopy(self.data)
        if "physical" in self.given:
            out.pop("model")
        else:
            out.pop("physical")
        return out


def _check_keys(data: dict, text: str | None) -> None:
    for section, values in data.items():
        if section not in DEFAULTS:
            raise ConfigError(section, "unknown section", _locate(text, section, None))
        if not isinstance(values, dict):
            raise ConfigError(section, "expected a [section] table", _locate(text, section, None))
        for key in values:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key", _locate(text, section, key))


def load_config(data: dict, text: str | None = None) -> RunConfig:
    """Validate a nested mapping and merge it over the defaults."""
    _check_keys(data, text)
    if "model" in data and "physical" in data:
        raise ConfigError("physical", "give either [model] or [physical], not both", _locate(text, "physical", None))
    merged = copy.deepcopy(DEFAULTS)
    for section, values in data.items():
        merged[section].update(values)
    return RunConfig(merged, {k: dict(v) for k, v in data.items()}, text)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a TOML run config (or the ``config`` block of a JSON manifest).

    ``overrides`` are ``section.key=value`` strings; values use TOML syntax
    and fall back to plain strings.
    """
    data, text = {}, None
    if path is not None:
        with open(path, "rb") as fh:
            raw = fh.read()
        text = raw.decode()
        if str(path).endswith(".json"):
            doc = json.loads(text)
            data = doc.get("config", doc)
            text = None
        else:
            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(str(path), f"malformed TOML: {exc}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value
        data.setdefault(section, {})[key] = parsed
    return load_config(data, text)
