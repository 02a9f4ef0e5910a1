"""Run configuration: strict YAML schema with documented defaults.

Every optional key has a default in ``DEFAULTS``; unknown keys anywhere in
the tree are rejected.  The resolved configuration (defaults filled in)
is what gets hashed into result summaries.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .builtins import BUILTIN_NAMES, builtin_model
from .errors import PAContractError
from .hjb import SolverSettings, SpaceGrid
from .model_core import ModelSpec, model_from_dict, model_to_dict
from .nash import HamiltonianSettings
from .sim import TimeGrid

__all__ = ["ConfigError", "DEFAULTS", "RunConfig", "load_config", "parse_config"]

COMMANDS = ("solve", "simulate", "verify", "bench")


class ConfigError(PAContractError):
    """Invalid or incomplete run configuration."""


# section -> key -> default.  ``None`` means "derived" (see the comments).
DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "builtin": None,  # one of BUILTIN_NAMES, or give ``spec``
        "params": {},  # builtin parameter overrides
        "spec": None,  # full model mapping (model_to_dict layout)
        "terminal": None,  # overrides the liquidation value L(x)
    },
    "grid": {
        "nodes": 81,  # per state coordinate (int or list)
        "box": None,  # [[lo...], [hi...]]; default: the model's state box
        "steps": 50,  # backward time steps
    },
    "solver": {
        "scheme": "auto",  # auto | explicit | imex
        "boundary": "linear",  # linear | clamp
        "cfl": 0.45,
        "tol": 1e-8,  # principal sup tolerance
        "inner_tol": 1e-9,  # best-response tolerance
        "max_sweeps": 60,
        "z_max": 5.0,
        "h_max": 5.0,
        "k_max": 5.0,
        "jump_measure_correction": True,
        "basis_degree": 2,  # LSMC regression degree
        "require_interior": True,
    },
    "experiment": {
        "command": None,  # optional; the CLI subcommand wins
        "n_paths": 2000,
        "n_steps": 20,  # simulation steps
        "seed": 0,
        "probes": None,  # list of states for the cross-check; default [X0]
        "policy": "equilibrium",  # simulate: equilibrium | zero | list of constant actions
        "reweight": True,  # simulate: also estimate under the reference measure
        "deviations": "default",  # verify: default grid or list of {agent, action}
        "z_scale": 1.0,  # verify: pay z_scale * z* (values != 1 give a wrong contract)
        "y0": None,  # verify: initial certainty equivalents; default U_A^{-1}(R_0)
    },
    "output": {
        "directory": "out",
        "formats": ["csv", "json"],
    },
    "workers": 1,
}


def _check_keys(section: str, data: Mapping, allowed: Mapping):
    if not isinstance(data, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}; allowed: {sorted(allowed)}")


def _resolve(raw: Mapping) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError("configuration must be a mapping")
    _check_keys("<top>", raw, DEFAULTS)
    out = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(DEFAULTS[key], dict):
            if value is None:
                continue
            _check_keys(key, value, DEFAULTS[key])
            out[key].update(copy.deepcopy(dict(value)))
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    data: dict

    @property
    def hash(self) -> str:
        """Digest of everything that can change results (not the output
        location or the worker count)."""
        data = copy.deepcopy(self.data)
        data.pop("workers")
        data["output"].pop("directory")
        blob = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        return self.data[name]

    @property
    def workers(self) -> int:
        return int(self.data["workers"])

    @property
    def seed(self) -> int:
        return int(self.data["experiment"]["seed"])

    def with_overrides(self, *, seed=None, workers=None, out=None) -> "RunConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["experiment"]["seed"] = int(seed)
        if workers is not None:
            data["workers"] = int(workers)
        if out is not None:
            data["output"]["directory"] = str(out)
        return parse_config(data)

    # -- builders ---------------------------------------------------------

    def model(self) -> ModelSpec:
        m = self.data["model"]
        if (m["builtin"] is None) == (m["spec"] is None):
            raise ConfigError("model: give exactly one of 'builtin' or 'spec'")
        if m["builtin"] is not None:
            if m["builtin"] not in BUILTIN_NAMES:
                raise ConfigError(f"model.builtin: unknown model {m['builtin']!r}; supported: {BUILTIN_NAMES}")
            model = builtin_model(m["builtin"], m["params"])
        else:
            if m["params"]:
                raise ConfigError("model.params applies to builtin models only; put params inside model.spec")
            spec = m["spec"]
            if not isinstance(spec, Mapping):
                raise ConfigError("model.spec must be a mapping")
            principal = spec.get("principal")
            if not isinstance(principal, Mapping) or "liquidation" not in principal:
                if m["terminal"] is None:
                    raise ConfigError("missing key 'model.spec.principal.liquidation' (terminal value L)")
            model = model_from_dict(self._with_terminal(spec, m["terminal"]))
            return model
        if m["terminal"] is not None:
            model = model_from_dict(self._with_terminal(model_to_dict(model), m["terminal"]))
        return model

    @staticmethod
    def _with_terminal(spec: Mapping, terminal) -> dict:
        spec = copy.deepcopy(dict(spec))
        if terminal is not None:
            spec["principal"] = {**dict(spec.get("principal") or {}), "liquidation": str(terminal)}
        return spec

    def space_grid(self, model: ModelSpec) -> SpaceGrid:
        g = self.data["grid"]
        box = g["box"]
        if box is not None:
            if len(box) != 2:
                raise ConfigError("grid.box must be [[lo...], [hi...]]")
            box = (tuple(map(float, box[0])), tuple(map(float, box[1])))
        try:
            return SpaceGrid.for_model(model, g["nodes"], box)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"grid: {exc}") from exc

    def time_grid(self, model: ModelSpec) -> TimeGrid:
        return TimeGrid(model.horizon, int(self.data["grid"]["steps"]))

    def sim_grid(self, model: ModelSpec) -> TimeGrid:
        return TimeGrid(model.horizon, int(self.data["experiment"]["n_steps"]))

    def solver_settings(self) -> SolverSettings:
        s = self.data["solver"]
        ham = HamiltonianSettings(
            z_max=float(s["z_max"]), h_max=float(s["h_max"]), k_max=float(s["k_max"]),
            tol=float(s["tol"]), inner_tol=float(s["inner_tol"]), max_sweeps=int(s["max_sweeps"]),
            jump_measure_correction=bool(s["jump_measure_correction"]),
        )
        return SolverSettings(scheme=s["scheme"], boundary=s["boundary"], cfl=float(s["cfl"]), hamiltonian=ham)


def _validate(data: dict) -> None:
    s = data["solver"]
    if s["scheme"] not in ("auto", "explicit", "imex"):
        raise ConfigError(f"solver.scheme must be auto, explicit or imex, got {s['scheme']!r}")
    if s["boundary"] not in ("linear", "clamp"):
        raise ConfigError(f"solver.boundary must be linear or clamp, got {s['boundary']!r}")
    for key in ("cfl", "tol", "inner_tol", "z_max", "h_max", "k_max"):
        if not float(s[key]) > 0:
            raise ConfigError(f"solver.{key} must be positive")
    if int(s["basis_degree"]) < 1:
        raise ConfigError("solver.basis_degree must be at least 1")
    e = data["experiment"]
    if e["command"] is not None and e["command"] not in COMMANDS:
        raise ConfigError(f"experiment.command must be one of {COMMANDS}")
    if int(e["n_paths"]) < 2:
        raise ConfigError("experiment.n_paths must be at least 2")
    if int(e["n_steps"]) < 1 or int(data["grid"]["steps"]) < 1:
        raise ConfigError("time steps must be positive")
    if int(e["seed"]) < 0:
        raise ConfigError("experiment.seed must be nonnegative")
    dev = e["deviations"]
    if not (dev == "default" or isinstance(dev, list)):
        raise ConfigError("experiment.deviations must be 'default' or a list of {agent, action}")
    if isinstance(dev, list) and not dev:
        raise ConfigError("experiment.deviations is empty: nothing to verify")
    if isinstance(dev, list):
        for idx, d in enumerate(dev):
            if not isinstance(d, Mapping) or set(d) - {"agent", "action", "description"} or "action" not in d:
                raise ConfigError(f"experiment.deviations[{idx}] must be a mapping with 'agent' and 'action'")
    fmts = data["output"]["formats"]
    if not isinstance(fmts, list) or set(fmts) - {"csv", "json"}:
        raise ConfigError("output.formats must be a list drawn from csv, json")
    if int(data["workers"]) < 1:
        raise ConfigError("workers must be at least 1")


def parse_config(raw: Mapping) -> RunConfig:
    data = _resolve(raw)
    try:
        _validate(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    return parse_config(raw or {})

