"""Command-line front end: ``wiener-minimax {check,solve,lfd,csnr,simulate,verify}``.

Every command reads a JSON config (see :mod:`wiener_minimax.config`),
writes its outputs plus ``manifest.json`` into ``--out`` and prints a short
JSON summary.  The manifest echoes the resolved config, so passing it back
as ``--config`` reproduces every output byte for byte.

Exit codes::

    0  success
    1  malformed config or failed precondition
    2  model outside every supported regime
    3  solver non-convergence (obstacle solver, Newton, Monte Carlo quality)
    4  boundary extraction or validation failure
    5  no sign change of the risk derivative in the bracket
    6  saddle-point check violated
    7  a verification check failed
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import __version__
from . import csnr as csnr_mod
from .config import ConfigError, load_config
from .fbp import (
    ConvergenceError,
    ExtractionError,
    Grid2D,
    RegimeError,
    SolverParams,
    extract_boundaries,
    solve_finite_horizon,
    solve_vi,
    validate_boundaries,
)
from .io import SCHEMA_VERSION, SchemaError, dumps, read_csv, write_csv, write_json
from .minimax import BracketError, NoSignChangeError, find_lfd, verify_saddle
from .model import check_assumptions, model_from_dict
from .risk import MCQualityError, estimate_Jbar, estimate_Jbar_mixture
from .rules import BoundaryPair, ImmediateRule
from .simulate import (
    MCSettings,
    RngSpec,
    batch_mean_se,
    gamma_T,
    gamma_T_closed,
    h_exact,
    sample_sup_log_phi_hat,
    simulate_joint,
    simulate_terminal,
)

__all__ = ["main", "build_parser", "EXIT"]

EXIT = {
    "ok": 0,
    "config": 1,
    "regime": 2,
    "convergence": 3,
    "boundaries": 4,
    "no_sign_change": 5,
    "saddle": 6,
    "verify": 7,
}

# stream offset for path dumps, disjoint from the estimator streams
_DUMP_STREAM = 2**63


class _Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: dict[str, dict] = {}
        out.mkdir(parents=True, exist_ok=True)

    def json(self, name: str, schema: str, doc: dict) -> None:
        write_json(self.out / name, doc)
        self.outputs[name] = {"schema": schema, "schema_version": SCHEMA_VERSION}

    def csv(self, name: str, schema: str, header, rows) -> None:
        write_csv(self.out / name, header, rows)
        self.outputs[name] = {"schema": schema, "schema_version": SCHEMA_VERSION,
                              "columns": list(header)}

    def finish(self, code: int, summary: dict) -> int:
        write_json(self.out / "manifest.json", {
            "command": self.command,
            "package_version": __version__,
            "exit_code": code,
            "outputs": dict(sorted(self.outputs.items())),
            "config": self.cfg,
        })
        sys.stdout.write(dumps({"command": self.command, "exit_code": code, **summary}))
        return code


def _mc(cfg) -> MCSettings:
    m = cfg["mc"]
    return MCSettings(m["n_paths"], m["n_batches"], m["dt"], m["horizon"])


def _rng(cfg, stream: int = 0) -> RngSpec:
    return RngSpec(cfg["mc"]["seed"], stream)


def _grid(cfg) -> Grid2D:
    x, u = cfg["grid"]["x"], cfg["grid"]["logphi"]
    return Grid2D.uniform(x[0], x[1], x[2], u[0], u[1], u[2])


def _running_cost(cfg):
    return csnr_mod.RunningCostFn.from_dict(cfg["csnr"]["f"])


# --------------------------------------------------------------------- check
def cmd_check(cfg: dict, run: _Run) -> int:
    report = check_assumptions(model_from_dict(cfg["model"]))
    run.json("check.json", "assumption_report", report.to_dict())
    code = EXIT["ok"] if report.ok else EXIT["regime"]
    return run.finish(code, {"regime": report.regime, "violations": len(report.violations)})


# --------------------------------------------------------------------- solve
def _solve_boundaries(cfg: dict, run: _Run, write_value: bool):
    """Solve, extract and validate; returns ``(pair, info, code)``."""
    model = model_from_dict(cfg["model"])
    s = cfg["solver"]
    params = SolverParams(s["method"], s["tol"], s["max_iters"], s["omega"], s["contact_tol"])
    grid = _grid(cfg)
    surface = solve_vi(model, grid, params)
    regime = surface.meta["regime"]
    info = {
        "regime": regime,
        "grid": grid.to_dict(),
        "method": surface.method,
        "iterations": surface.iterations,
        "complementarity_residual": surface.residual,
    }
    if write_value:
        X = np.repeat(grid.x_nodes, grid.shape[1])
        P = np.tile(grid.phi, grid.shape[0])
        run.csv("value.csv", "value_surface", ["x", "phi", "V"],
                zip(X.tolist(), P.tolist(), surface.V.ravel().tolist()))
    try:
        pair = extract_boundaries(surface, s["contact_tol"])
    except ExtractionError as exc:
        info["validation"] = {"passed": False, "message": f"extraction failed: {exc}"}
        return None, info, EXIT["boundaries"]
    run.csv("boundaries.csv", "boundaries", ["x", "l0", "l1"], pair.to_rows())
    report = validate_boundaries(pair, regime)
    info["validation"] = report.to_dict()
    if report.passed and regime == "constant_snr":
        # constant SNR: the band must not move with x beyond one grid cell
        cell = float(np.max(np.diff(grid.logphi_nodes)))
        spread = max(float(np.ptp(np.log(pair.l0))), float(np.ptp(np.log(pair.l1))))
        info["validation"]["x_spread_logphi"] = spread
        if spread > cell:
            info["validation"].update(passed=False, message="constant-SNR boundaries vary in x")
    passed = info["validation"]["passed"]
    if passed and s["sandwich_T"] is not None:
        T = float(s["sandwich_T"])
        nt = int(s["sandwich_nt"] or max(1, round(25 * T)))
        VT = solve_finite_horizon(model, grid, T, nt).V
        gam = gamma_T_closed(grid.phi, T)[None, :]
        info["sandwich"] = {
            "T": T,
            "nt": nt,
            "upper_violation": float(np.max(surface.V - VT)),
            "lower_violation": float(np.max(VT - gam - surface.V)),
        }
    return (pair if passed else None), info, (EXIT["ok"] if passed else EXIT["boundaries"])


def cmd_solve(cfg: dict, run: _Run) -> int:
    pair, info, code = _solve_boundaries(cfg, run, write_value=True)
    run.json("solve.json", "solve_report", info)
    summary = {"regime": info["regime"], "validated": info["validation"]["passed"]}
    if pair is not None:
        lo, hi = pair.band_at(cfg["x0"])
        summary["band_at_x0"] = [lo, hi]
    return run.finish(code, summary)


# ----------------------------------------------------------------------- lfd
def _rule_for(cfg: dict, run: _Run, source: str):
    """Stopping rule from ``source`` (``solve``, ``csnr`` or a boundaries CSV)."""
    if source == "solve":
        pair, info, code = _solve_boundaries(cfg, run, write_value=False)
        run.json("solve.json", "solve_report", info)
        return pair, code
    if source == "csnr":
        model = model_from_dict(cfg["model"])
        if check_assumptions(model).regime != "constant_snr":
            raise ConfigError("boundaries 'csnr' requires a constant-SNR model")
        sol = csnr_mod.solve(cfg["csnr"]["rho0"], _running_cost(cfg))
        return sol.rule(), EXIT["ok"]
    try:
        header, data = read_csv(source)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read boundaries from {source!r}: {exc}") from None
    if header != ["x", "l0", "l1"]:
        raise ConfigError("boundaries CSV must have columns x,l0,l1")
    try:
        return BoundaryPair(data[:, 0], data[:, 1], data[:, 2]), EXIT["ok"]
    except ValueError as exc:
        raise ConfigError(f"invalid boundaries: {exc}") from None


def cmd_lfd(cfg: dict, run: _Run) -> int:
    lfd = cfg["lfd"]
    rule, code = _rule_for(cfg, run, lfd["boundaries"])
    if rule is None:
        return run.finish(code, {"stage": "boundaries"})
    model = model_from_dict(cfg["model"])
    mc, rng = _mc(cfg), _rng(cfg)
    bracket = tuple(lfd["bracket"]) if lfd["bracket"] is not None else None
    doc = {"boundaries": lfd["boundaries"], "x0": cfg["x0"]}
    try:
        result = find_lfd(model, cfg["x0"], rule, lfd["tol"], mc, rng, lfd["n_scan"], bracket)
    except BracketError as exc:
        raise ConfigError(str(exc)) from None
    except NoSignChangeError as exc:
        scan = sorted(exc.scan, key=lambda d: d.phi)
        run.csv("derivative_curve.csv", "derivative_curve", ["phi", "derivative", "stderr"],
                [(d.phi, d.value, d.stderr) for d in scan])
        doc.update(error=str(exc), scan=[d.to_dict() for d in scan])
        run.json("lfd.json", "lfd_result", doc)
        return run.finish(EXIT["no_sign_change"], {"roots": []})
    scan = sorted(result.scan, key=lambda d: d.phi)
    run.csv("derivative_curve.csv", "derivative_curve", ["phi", "derivative", "stderr"],
            [(d.phi, d.value, d.stderr) for d in scan])
    saddle = verify_saddle(model, cfg["x0"], result.phi0, rule, lfd["psi_grid"], mc, rng,
                           lfd["delta"])
    doc.update(phi0=result.phi0, lfd=result.to_dict(), saddle=saddle.to_dict())
    run.json("lfd.json", "lfd_result", doc)
    code = EXIT["ok"] if saddle.passed else EXIT["saddle"]
    return run.finish(code, {"phi0": result.phi0, "roots": [r.phi0 for r in result.roots],
                             "saddle_passed": saddle.passed})


# ---------------------------------------------------------------------- csnr
def cmd_csnr(cfg: dict, run: _Run) -> int:
    c = cfg["csnr"]
    f = _running_cost(cfg)
    sol = csnr_mod.solve(c["rho0"], f)
    psi = [float(p) for p in c["psi_grid"]]
    run.csv("ubar.csv", "ubar_curve", ["psi", "Ubar"],
            [(p, csnr_mod.eval_Ubar(sol, p)) for p in psi])
    doc = sol.to_dict()
    doc["product_l0_l1"] = sol.l0 * sol.l1
    doc["Ubar_at_phi0"] = csnr_mod.eval_Ubar(sol, sol.phi0)
    run.json("csnr.json", "csnr_solution", doc)
    return run.finish(EXIT["ok"], {"l0": sol.l0, "l1": sol.l1, "phi0": sol.phi0})


# ------------------------------------------------------------------ simulate
def _dump_paths(cfg: dict, run: _Run, model, rule, phi_rule: float) -> None:
    sim = cfg["simulate"]
    mc = _mc(cfg)
    horizon = mc.resolved_horizon(model)
    for k in range(sim["n_dump"]):
        stream = _DUMP_STREAM + k
        path = simulate_joint(model, cfg["x0"], mc.dt, horizon, _rng(cfg, stream))
        lo, hi = rule.log_band(path.X)
        lphi = math.log(phi_rule) + path.logL
        out = np.flatnonzero((lphi <= lo) | (lphi >= hi))
        stop = int(out[0]) + 1 if out.size else path.times.size
        name = f"{cfg['run_id']}_{k}.csv"
        run.csv(name, "path", ["t", "X", "logL"],
                zip(path.times[:stop].tolist(), path.X[:stop].tolist(), path.logL[:stop].tolist()))


def cmd_simulate(cfg: dict, run: _Run) -> int:
    sim = cfg["simulate"]
    model = model_from_dict(cfg["model"])
    psi = float(sim["psi"])
    phi_rule = float(sim["phi_rule"]) if sim["phi_rule"] is not None else psi
    sol = None
    if sim["rule"] == "immediate":
        rule = ImmediateRule()
    elif sim["rule"] == "csnr":
        rule, _ = _rule_for(cfg, run, "csnr")
        sol = csnr_mod.solve(cfg["csnr"]["rho0"], _running_cost(cfg))
    else:
        rule, code = _rule_for(cfg, run, "solve")
        if rule is None:
            return run.finish(code, {"stage": "boundaries"})
    mc = _mc(cfg)
    com = estimate_Jbar(model, cfg["x0"], psi, rule, mc, _rng(cfg), phi_rule)
    mix = estimate_Jbar_mixture(model, cfg["x0"], psi, rule, mc, _rng(cfg), phi_rule)
    doc = {
        "rule": sim["rule"],
        "psi": psi,
        "phi_rule": phi_rule,
        "change_of_measure": com.to_dict(),
        "mixture": mix.to_dict(),
    }
    if rule.immediate:
        doc["mean_tau"] = 0.0
    else:
        doc["mean_tau"] = (mix.meta["mean_tau_null"] + psi * mix.meta["mean_tau_alt"]) / (1 + psi)
        doc["p_err_null"] = mix.meta["p_err_null"]
        doc["p_err_alt"] = mix.meta["p_err_alt"]
    f_const = sol.f.constant_value if sol is not None else None
    if sol is not None and f_const is not None and math.isclose(f_const, model.cost_rate):
        inside = sol.l0 < phi_rule < sol.l1
        exact = csnr_mod.eval_Ubar(sol, psi, phi_rule) if inside else min(1.0, psi) / (1 + psi)
        doc["closed_form"] = {
            "value": exact,
            "z_change_of_measure": (com.value - exact) / com.stderr if com.stderr > 0 else 0.0,
        }
    run.json("simulate.json", "simulate_summary", doc)
    _dump_paths(cfg, run, model, rule, phi_rule)
    return run.finish(EXIT["ok"], {"risk": com.value, "stderr": com.stderr,
                                   "mean_tau": doc["mean_tau"]})


# -------------------------------------------------------------------- verify
def _check_martingale(cfg, n):
    model = model_from_dict(cfg["model"])
    _, logL, _ = simulate_terminal(model, cfg["x0"], 1.0, 1e-3, n, _rng(cfg, 1))
    L = np.exp(logL)
    mean, se = float(L.mean()), float(L.std(ddof=1) / math.sqrt(n))
    return {"mean_L_T": mean, "stderr": se, "passed": abs(mean - 1.0) <= 4 * se}


def _check_sup_law(cfg, n):
    s = sample_sup_log_phi_hat(0.5, 4.0, 1e-2, n, _rng(cfg, 2))
    res = stats.kstest(s, "expon")
    return {"ks_statistic": float(res.statistic), "p_value": float(res.pvalue),
            "passed": bool(res.pvalue > 0.01)}


def _check_h_value(cfg, n):
    phi = 0.5
    s = sample_sup_log_phi_hat(phi, 4.0, 1e-2, n, _rng(cfg, 3))
    vals = np.minimum(1.0, phi * np.exp(s))
    batch = (np.arange(n) * 20) // n
    mean, se = batch_mean_se(vals, batch, 20)
    exact = h_exact(phi)
    # the tail beyond the horizon is sampled exactly, so no truncation bias remains
    bias = 0.0
    return {"estimate": mean, "stderr": se, "exact": exact, "truncation_bias": bias,
            "passed": abs(mean - exact) <= 4 * se + bias}


def _check_csnr_closed_form(cfg, n):
    worst = 0.0
    for rho0, c in ((1.0, 1.0), (0.5, 2.0)):
        f = csnr_mod.RunningCostFn.constant(c)
        for l in (0.2, 0.5, 2.0, 5.0):
            worst = max(worst, abs(csnr_mod.M_eval(rho0, f, l) - csnr_mod.M_closed_constant(rho0, c, l)))
    return {"max_abs_error": worst, "passed": worst <= 1e-10}


def _check_gamma_quadrature(cfg, n):
    worst = 0.0
    for T in (1.0, 8.0):
        phi = np.array([0.25, 0.5, 1.0, 2.0])
        worst = max(worst, float(np.max(np.abs(gamma_T(phi, T) - gamma_T_closed(phi, T)))))
    return {"max_abs_error": worst, "passed": worst <= 1e-10}


_VERIFY: dict[str, Callable] = {
    "martingale": _check_martingale,
    "sup_law": _check_sup_law,
    "h_value": _check_h_value,
    "csnr_closed_form": _check_csnr_closed_form,
    "gamma_quadrature": _check_gamma_quadrature,
}


def cmd_verify(cfg: dict, run: _Run) -> int:
    n = int(cfg["verify"]["n_paths"])
    results = {name: _VERIFY[name](cfg, n) for name in cfg["verify"]["checks"]}
    passed = all(r["passed"] for r in results.values())
    run.json("verify.json", "verify_report", {"checks": results, "passed": passed})
    return run.finish(EXIT["ok"] if passed else EXIT["verify"],
                      {"passed": passed, "failed": [k for k, r in results.items() if not r["passed"]]})


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "lfd": cmd_lfd,
    "csnr": cmd_csnr,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wiener-minimax",
        description="Optimal boundaries and least favorable priors for sequential drift tests.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config or a previous manifest")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=None, help="override mc.seed")
        p.add_argument("--threads", type=int, default=None,
                       help="limit native thread pools (BLAS/OpenMP)")
    return parser


def _run(args) -> int:
    try:
        cfg = load_config(args.config, args.seed)
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT["config"]
    run = _Run(args.command, cfg, Path(args.out))
    try:
        return COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return run.finish(EXIT["config"], {"error": str(exc)})
    except RegimeError as exc:
        print(f"regime error: {exc}", file=sys.stderr)
        return run.finish(EXIT["regime"], {"error": str(exc)})
    except (ConvergenceError, csnr_mod.CsnrError, MCQualityError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return run.finish(EXIT["convergence"], {"error": str(exc)})
    except ExtractionError as exc:
        print(f"boundary error: {exc}", file=sys.stderr)
        return run.finish(EXIT["boundaries"], {"error": str(exc)})


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return EXIT["config"]
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return _run(args)
    return _run(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
