"""Run configuration: JSON schema, defaults and resolution.

A config is a JSON object::

    {
      "schema_version": "1.0",
      "run_id": "run",
      "model": {"type": "bessel", "delta0": 3, "delta1": 4, "cost_rate": 1},
      "x0": 1.0,
      "grid": {"x": [0.5, 2.0, 257], "logphi": [-0.5, 0.5, 513]},
      "solver": {"method": "policy", "tol": 1e-8, "max_iters": 100000,
                 "omega": 1.5, "contact_tol": null,
                 "sandwich_T": null, "sandwich_nt": null},
      "mc": {"n_paths": 200000, "n_batches": 20, "dt": 1e-4,
             "horizon": null, "seed": 0},
      "lfd": {"tol": 1e-3, "n_scan": 17, "psi_grid": [...], "bracket": null,
              "delta": 0.05, "boundaries": "solve"},
      "csnr": {"rho0": 1.0, "f": {"type": "constant", "c": 1.0},
               "psi_grid": [...]},
      "simulate": {"psi": 1.0, "rule": "csnr", "phi_rule": null, "n_dump": 0},
      "verify": {"n_paths": 100000, "checks": [...]}
    }

Only ``model`` is required.  :func:`resolve_config` fills every default so a
manifest echoing the resolved config reproduces the run.  A manifest (an
object with a ``config`` key) is accepted wherever a config is.
"""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Optional

from .io import SCHEMA_VERSION, SchemaError, check_schema

__all__ = ["ConfigError", "DEFAULTS", "load_config", "resolve_config", "VERIFY_CHECKS"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


VERIFY_CHECKS = ("martingale", "sup_law", "h_value", "csnr_closed_form", "gamma_quadrature")

DEFAULTS: dict[str, Any] = {
    "run_id": "run",
    "x0": None,
    "grid": {"x": None, "logphi": [-8.0, 8.0, 513]},
    "solver": {
        "method": "policy",
        "tol": 1e-8,
        "max_iters": 100000,
        "omega": 1.5,
        "contact_tol": None,
        "sandwich_T": None,
        "sandwich_nt": None,
    },
    "mc": {"n_paths": 200000, "n_batches": 20, "dt": 1e-4, "horizon": None, "seed": 0},
    "lfd": {
        "tol": 1e-3,
        "n_scan": 17,
        "psi_grid": [0.25, 0.5, 0.8, 1.25, 2.0, 4.0],
        "bracket": None,
        "delta": 0.05,
        "boundaries": "solve",
    },
    "csnr": {"rho0": None, "f": None, "psi_grid": None},
    "simulate": {"psi": 1.0, "rule": "csnr", "phi_rule": None, "n_dump": 0},
    "verify": {"n_paths": 100000, "checks": list(VERIFY_CHECKS)},
}


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"{path}{key} must be an object")
            out[key] = _merge(base[key], val, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _positive(value, name, integer=False):
    if integer:
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"{name} must be a positive integer")
    elif not isinstance(value, (int, float)) or isinstance(value, bool) or not (
        value > 0 and math.isfinite(value)
    ):
        raise ConfigError(f"{name} must be a positive number")
    return value


def _triple(value, name):
    if (
        not isinstance(value, list)
        or len(value) != 3
        or not all(isinstance(v, (int, float)) for v in value)
        or not isinstance(value[2], int)
        or not value[0] < value[1]
    ):
        raise ConfigError(f"{name} must be [lo, hi, n] with lo < hi and integer n")
    return [float(value[0]), float(value[1]), int(value[2])]


def resolve_config(raw: dict, seed: Optional[int] = None) -> dict:
    """Validate ``raw`` and fill defaults; ``seed`` overrides ``mc.seed``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in raw and "model" not in raw:
        raw = raw["config"]
        if not isinstance(raw, dict):
            raise ConfigError("manifest 'config' must be an object")
    raw = dict(raw)
    version = raw.pop("schema_version", SCHEMA_VERSION)
    try:
        check_schema({"schema_version": version})
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None
    if "model" not in raw or not isinstance(raw["model"], dict):
        raise ConfigError("config needs a 'model' object")
    model = copy.deepcopy(raw.pop("model"))
    cfg = _merge(DEFAULTS, raw, "")
    cfg["model"] = model

    # imported lazily to keep config parsing free of heavy imports
    from .model import ModelError, model_from_dict

    try:
        m = model_from_dict(model)
    except (ModelError, ValueError) as exc:
        raise ConfigError(f"bad model: {exc}") from None
    cfg["model"].setdefault("cost_rate", m.cost_rate)

    if seed is not None:
        cfg["mc"]["seed"] = int(seed)
    mc = cfg["mc"]
    _positive(mc["n_paths"], "mc.n_paths", True)
    _positive(mc["n_batches"], "mc.n_batches", True)
    _positive(mc["dt"], "mc.dt")
    if mc["horizon"] is not None:
        _positive(mc["horizon"], "mc.horizon")
    if not isinstance(mc["seed"], int) or not 0 <= mc["seed"] < 2**64:
        raise ConfigError("mc.seed must be an unsigned 64-bit integer")

    lo, hi = m.domain
    if cfg["x0"] is None:
        cfg["x0"] = 1.0 if lo < 1.0 < hi else (0.0 if lo < 0.0 < hi else None)
        if cfg["x0"] is None:
            raise ConfigError("x0 is required for this domain")
    if not lo < float(cfg["x0"]) < hi:
        raise ConfigError("x0 must lie inside the model domain")
    cfg["x0"] = float(cfg["x0"])

    grid = cfg["grid"]
    if grid["x"] is None:
        x0 = cfg["x0"]
        grid["x"] = [x0 - 0.5, x0 + 0.5, 129] if math.isinf(lo) else [
            max(lo + 0.5 * (x0 - lo), x0 / 2 if lo == 0 else x0 - 1.0), x0 * 2 if lo == 0 else x0 + 1.0, 129]
    grid["x"] = _triple(grid["x"], "grid.x")
    grid["logphi"] = _triple(grid["logphi"], "grid.logphi")

    sol = cfg["solver"]
    if sol["method"] not in ("policy", "psor"):
        raise ConfigError("solver.method must be 'policy' or 'psor'")

    lfd = cfg["lfd"]
    _positive(lfd["tol"], "lfd.tol")
    _positive(lfd["n_scan"], "lfd.n_scan", True)
    if lfd["bracket"] is not None and (
        not isinstance(lfd["bracket"], list) or len(lfd["bracket"]) != 2
    ):
        raise ConfigError("lfd.bracket must be [lo, hi] or null")
    for p in lfd["psi_grid"]:
        _positive(p, "lfd.psi_grid entries")

    cs = cfg["csnr"]
    if cs["rho0"] is None:
        rho = m.rho(cfg["x0"])
        cs["rho0"] = abs(float(rho))
    _positive(cs["rho0"], "csnr.rho0")
    if cs["f"] is None:
        cs["f"] = {"type": "constant", "c": float(m.cost_rate)}
    elif isinstance(cs["f"], (int, float)):
        cs["f"] = {"type": "constant", "c": float(cs["f"])}
    if not isinstance(cs["f"], dict) or cs["f"].get("type") not in ("constant", "expr"):
        raise ConfigError("csnr.f must be a number or {type: constant|expr, ...}")
    if cs["psi_grid"] is None:
        cs["psi_grid"] = [math.exp(-2.0 + 4.0 * k / 64) for k in range(65)]

    simc = cfg["simulate"]
    if simc["rule"] not in ("csnr", "solve", "immediate"):
        raise ConfigError("simulate.rule must be csnr, solve or immediate")
    _positive(simc["psi"], "simulate.psi")
    if not isinstance(simc["n_dump"], int) or simc["n_dump"] < 0:
        raise ConfigError("simulate.n_dump must be a nonnegative integer")

    ver = cfg["verify"]
    unknown = set(ver["checks"]) - set(VERIFY_CHECKS)
    if unknown:
        raise ConfigError(f"unknown verify checks {sorted(unknown)}")
    cfg["schema_version"] = SCHEMA_VERSION
    return cfg


def load_config(path, seed: Optional[int] = None) -> dict:
    """Read and resolve a config (or a manifest) from ``path``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from None
    return resolve_config(raw, seed)
