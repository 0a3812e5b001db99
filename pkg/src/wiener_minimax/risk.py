"""Monte Carlo estimates of the Bayesian risk of band stopping rules.

A rule is written in its own prior coordinates ``phi_rule``: it stops the
first time ``phi_rule * L_t`` leaves ``(l0(X_t), l1(X_t))``.  Evaluating it
for prior odds ``psi`` uses the same paths, which is how risks at several
priors share common random numbers.

Two estimators are provided:

* :func:`estimate_Jbar` simulates under the null only and reweights,
  ``Jbar = (1+psi)^-1 E0[min(1, psi L_tau) + c int_0^tau (1 + psi L_t) dt]``;
* :func:`estimate_Jbar_mixture` simulates both hypotheses and counts wrong
  decisions directly; it shares no random numbers with the first one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decision import Decision, decision_of, decisions_of
from .model import DiffusionModel
from .rules import ImmediateRule, StoppingRule
from .simulate import ExitSample, MCSettings, RngSpec, batch_mean_se, simulate_exits

__all__ = [
    "MCQualityError",
    "RiskEstimate",
    "as_rule",
    "check_quality",
    "simulate_rule",
    "jbar_terms",
    "estimate_Jbar",
    "estimate_Jbar_mixture",
    "decision_of",
    "Decision",
    "MAX_BAD_FRACTION",
]

MAX_BAD_FRACTION = 1e-3
_MIXTURE_FLOOR = 1000
_MIXTURE_STREAM = 2**62


class MCQualityError(RuntimeError):
    """Too many paths hit the horizon or left the state domain."""


@dataclass
class RiskEstimate:
    """Risk estimate with its split into error probability and waiting cost."""

    value: float
    stderr: float
    components: tuple[float, float]
    n_paths: int
    meta: dict = field(default_factory=dict)

    @property
    def error_prob_term(self) -> float:
        return self.components[0]

    @property
    def waiting_cost_term(self) -> float:
        return self.components[1]

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "stderr": self.stderr,
            "error_prob_term": self.components[0],
            "waiting_cost_term": self.components[1],
            "n_paths": self.n_paths,
            **self.meta,
        }


def as_rule(rule) -> StoppingRule:
    """Accept a stopping rule or a constant-SNR solution."""
    if isinstance(rule, StoppingRule):
        return rule
    if hasattr(rule, "rule") and callable(rule.rule):
        return rule.rule()
    raise TypeError(f"cannot use {type(rule).__name__} as a stopping rule")


def check_quality(sample: ExitSample) -> None:
    for side in ("horizon", "domain"):
        frac = sample.fraction(side)
        if frac > MAX_BAD_FRACTION:
            raise MCQualityError(
                f"{frac:.3%} of paths ended at the {side} (limit {MAX_BAD_FRACTION:.1%})"
            )


def simulate_rule(model, x0, phi_rule, rule, mc: MCSettings, rng: RngSpec, measure="P0",
                  check=True) -> ExitSample:
    """Simulate the rule ``phi_rule * L`` in band under ``measure``."""
    if not phi_rule > 0:
        raise ValueError("phi_rule must be positive")
    sample = simulate_exits(model, x0, math.log(phi_rule), as_rule(rule), mc, rng, measure)
    if check:
        check_quality(sample)
    return sample


def jbar_terms(sample: ExitSample, psi: float, cost_rate: float):
    """Per-path error and waiting terms of ``(1+psi) Jbar`` from a null sample."""
    psiL = psi * sample.L_tau
    err = np.minimum(1.0, psiL)
    wait = cost_rate * (sample.tau + psi * sample.int_L)
    return err, wait


def _from_terms(err, wait, psi, sample: ExitSample, meta) -> RiskEstimate:
    scale = 1.0 / (1.0 + psi)
    e_mean, _ = batch_mean_se(err, sample.batch, sample.n_batches)
    w_mean, _ = batch_mean_se(wait, sample.batch, sample.n_batches)
    value, se = batch_mean_se(scale * (err + wait), sample.batch, sample.n_batches)
    return RiskEstimate(value, se, (scale * e_mean, scale * w_mean), sample.n_paths, meta)


def _provenance(mc: MCSettings, rng: RngSpec, sample: Optional[ExitSample] = None) -> dict:
    meta = {
        "seed": int(rng.seed),
        "stream": int(rng.stream),
        "n_batches": mc.n_batches,
        "dt": mc.dt,
    }
    if sample is not None:
        meta["horizon"] = sample.horizon
        meta["horizon_fraction"] = sample.fraction("horizon")
        meta["domain_fraction"] = sample.fraction("domain")
    return meta


def estimate_Jbar(
    model: DiffusionModel,
    x0: float,
    psi: float,
    rule,
    mc: MCSettings,
    rng: RngSpec = RngSpec(),
    phi_rule: Optional[float] = None,
) -> RiskEstimate:
    """Change-of-measure estimate of ``Jbar(x0, psi; tau)``.

    ``tau`` stops when ``phi_rule * L`` leaves the band of ``rule``;
    ``phi_rule`` defaults to ``psi``.
    """
    if not psi > 0:
        raise ValueError("psi must be positive")
    rule = as_rule(rule)
    phi_rule = psi if phi_rule is None else phi_rule
    if rule.immediate:
        value = min(1.0, psi) / (1.0 + psi)
        return RiskEstimate(value, 0.0, (value, 0.0), mc.n_paths, _provenance(mc, rng))
    sample = simulate_rule(model, x0, phi_rule, rule, mc, rng)
    if np.all(sample.tau == 0.0):
        # every path stops at time zero: the risk is deterministic
        value = min(1.0, psi) / (1.0 + psi)
        return RiskEstimate(value, 0.0, (value, 0.0), sample.n_paths,
                            _provenance(mc, rng, sample))
    err, wait = jbar_terms(sample, psi, model.cost_rate)
    return _from_terms(err, wait, psi, sample, _provenance(mc, rng, sample))


def _component(model, x0, phi_rule, rule, n, mc, rng, measure):
    n_batches = min(mc.n_batches, n)
    sub = MCSettings(n, n_batches, mc.dt, mc.horizon, mc.block_size, mc.chunk_steps)
    return simulate_rule(model, x0, phi_rule, rule, sub, rng, measure)


def estimate_Jbar_mixture(
    model: DiffusionModel,
    x0: float,
    psi: float,
    rule,
    mc: MCSettings,
    rng: RngSpec = RngSpec(),
    phi_rule: Optional[float] = None,
) -> RiskEstimate:
    """Estimate ``Jbar`` by simulating each hypothesis and counting wrong decisions.

    The budget is split as ``n/(1+psi)`` null paths and the rest alternative
    paths, with at least 1000 per component.  The result is
    ``P(theta=0, d=1) + P(theta=1, d=0) + c E[tau]`` under the prior mixture.
    """
    if not psi > 0:
        raise ValueError("psi must be positive")
    rule = as_rule(rule)
    phi_rule = psi if phi_rule is None else phi_rule
    w0, w1 = 1.0 / (1.0 + psi), psi / (1.0 + psi)
    if rule.immediate:
        d = decision_of(psi).resolved()
        value = w0 * d + w1 * (1 - d)
        return RiskEstimate(value, 0.0, (value, 0.0), mc.n_paths, _provenance(mc, rng))
    n0 = max(_MIXTURE_FLOOR, int(round(mc.n_paths * w0)))
    n1 = max(_MIXTURE_FLOOR, mc.n_paths - n0)
    rng0 = RngSpec(rng.seed, (rng.stream + _MIXTURE_STREAM) % 2**64)
    rng1 = RngSpec(rng.seed, (rng.stream + _MIXTURE_STREAM + 2**61) % 2**64)
    s0 = _component(model, x0, phi_rule, rule, n0, mc, rng0, "P0")
    s1 = _component(model, x0, phi_rule, rule, n1, mc, rng1, "Pinf")
    # decision at exit: ties go to the alternative
    d0 = decisions_of(psi * s0.L_tau) != int(Decision.NULL)
    d1 = decisions_of(psi * s1.L_tau) != int(Decision.NULL)
    p01, se01 = batch_mean_se(d0.astype(float), s0.batch, s0.n_batches)
    p10, se10 = batch_mean_se((~d1).astype(float), s1.batch, s1.n_batches)
    t0, set0 = batch_mean_se(s0.tau, s0.batch, s0.n_batches)
    t1, set1 = batch_mean_se(s1.tau, s1.batch, s1.n_batches)
    c = model.cost_rate
    err = w0 * p01 + w1 * p10
    wait = c * (w0 * t0 + w1 * t1)
    # batch means of the per-component totals are independent across components
    v0, se_v0 = batch_mean_se(d0 + c * s0.tau, s0.batch, s0.n_batches)
    v1, se_v1 = batch_mean_se((~d1) + c * s1.tau, s1.batch, s1.n_batches)
    se = math.sqrt((w0 * se_v0) ** 2 + (w1 * se_v1) ** 2)
    meta = _provenance(mc, rng)
    meta.update({
        "n_null": n0,
        "n_alt": n1,
        "p_err_null": p01,
        "p_err_null_se": se01,
        "p_err_alt": p10,
        "p_err_alt_se": se10,
        "mean_tau_null": t0,
        "mean_tau_alt": t1,
    })
    return RiskEstimate(err + wait, se, (err, wait), n0 + n1, meta)
