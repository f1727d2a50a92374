"""Verification suites run by ``cdr verify``.

Each suite returns a :class:`SuiteResult` made of named numeric checks with
the observed value, the limit it is compared against, and a signed margin
(positive means the check passed with room to spare).
"""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import estimators as est
from . import simulator as sim
from ._rng import substream
from .filter import TheoryParams, theoretical_threshold


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    margin: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: value={self.value:.6g} limit={self.limit:.6g} margin={self.margin:+.3g}"


def at_most(name, value, limit):
    return Check(name, float(value), float(limit), bool(value <= limit), float(limit - value))


def at_least(name, value, limit):
    return Check(name, float(value), float(limit), bool(value >= limit), float(value - limit))


@dataclass
class SuiteResult:
    suite: str
    checks: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_json(self):
        body = asdict(self)
        body["passed"] = self.passed
        return json.dumps(body, indent=2)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  suite={self.suite} checks={len(self.checks)} failures={len(self.failures)} time={self.wall_time:.1f}s"


def default_study(seed=0):
    """The 30x30 world with frozen errors, a noisy imputation and noisy propensities."""
    world = sim.with_reference_errors(sim.make_world(seed=seed), seed)
    e_hat = sim.noisy_imputation(world.reference_errors, seed)
    p_hat = sim.noisy_propensity(world, seed)
    return world, e_hat, p_hat


def suite_formulas(seed=0, trials=10_000, z_limit=3.0) -> SuiteResult:
    """Monte Carlo mean and variance against the closed forms for IPS, DR and CDR."""
    t0 = time.perf_counter()
    world, e_hat, p_hat = default_study(seed)
    n = world.num_pairs
    obs = sim.observation_matrix(world, trials, seed)
    gammas = {
        "ips": ("ips", None),
        "dr": ("dr", None),
        "cdr[all-0]": ("cdr", np.zeros(n)),
        "cdr[all-1]": ("cdr", np.ones(n)),
        "cdr[oracle]": ("cdr", est.oracle_gamma(world.reference_errors, e_hat)),
    }
    checks = []
    for label, (kind, gamma) in gammas.items():
        rep = sim.empirical_moments(kind, world, e_hat, p_hat, gamma, trials, seed, observations=obs)
        checks.append(at_most(f"{label} mean |z|", abs(rep.mean_z), z_limit))
        checks.append(at_most(f"{label} variance |z|", abs(rep.variance_z), z_limit))
        bias_gap = abs(rep.empirical_bias - rep.closed_form_bias)
        checks.append(at_most(f"{label} bias gap / SE", bias_gap / rep.standard_error, z_limit))

    # unbiasedness of IPS under exact propensities
    rep = sim.empirical_moments("ips", world, None, world.p_true, trials=trials, seed=seed, observations=obs)
    checks.append(at_most("ips[p_hat=p] |mean - ideal| / SE",
                          abs(rep.empirical_mean - rep.ideal_loss) / rep.standard_error, z_limit))
    # exact imputation makes DR deterministic
    rep = sim.empirical_moments("dr", world, world.reference_errors, p_hat, trials=trials, seed=seed,
                                observations=obs)
    checks.append(at_most("dr[e_hat=e] |mean - ideal|", abs(rep.empirical_mean - rep.ideal_loss), 1e-12))
    checks.append(at_most("dr[e_hat=e] empirical variance", rep.empirical_variance, 1e-24))
    return SuiteResult("formulas", checks, time.perf_counter() - t0)


def lemma1_grid(rhos=(0.6, 0.7, 0.8, 0.9, 0.95),
                eps=((0.0, 0.0), (0.05, 0.0), (0.0, 0.05), (0.05, 0.05)),
                m_sigmas=(0.05, 0.1, 0.2), fractions=(0.5, 0.75, 0.9), mu_hat=1.0):
    """Parameter cells meeting the lemma's hypotheses.

    sigma_hat is placed at ``fraction`` of the threshold (so sigma_hat / mu_hat
    is below it); cells where that leaves sigma_hat under its lower bound
    ``m_sigma`` are dropped. ``M_mu = mu_hat``, and ``2 eps_mu <= mu_hat``.
    """
    cells = []
    for rho, (eps_mu, eps_sigma), m_sigma, frac in itertools.product(rhos, eps, m_sigmas, fractions):
        params = TheoryParams(rho, eps_mu, eps_sigma, M_mu=mu_hat, m_sigma=m_sigma, m_mu=mu_hat)
        threshold = theoretical_threshold(params)
        if not math.isfinite(threshold) or 2.0 * eps_mu > mu_hat:
            continue
        sigma_hat = frac * threshold * mu_hat
        if sigma_hat < m_sigma:
            continue
        cells.append((params, mu_hat, sigma_hat))
    return cells


def suite_lemma1(seed=0, draws=100_000, se_limit=3.0) -> SuiteResult:
    """Retention probability P(|e_hat - e| < e) >= rho - 3 SE on every grid cell.

    The looser event P(e_hat - 2 e < 0) is reported alongside each cell.
    """
    t0 = time.perf_counter()
    checks = []
    for k, (p, mu_hat, sigma_hat) in enumerate(lemma1_grid()):
        res = sim.verify_lemma1(mu_hat, sigma_hat, p.eps_mu, p.eps_sigma, p.rho, draws, seed=seed + k)
        floor = p.rho - se_limit * res.standard_error(p.rho)
        tag = (f"rho={p.rho} eps_mu={p.eps_mu} eps_sigma={p.eps_sigma} "
               f"m_sigma={p.m_sigma} ratio={sigma_hat / mu_hat:.4g}")
        checks.append(at_least(f"P(|e_hat-e|<e) {tag}", res.prob_within, floor))
        checks.append(at_least(f"P(e_hat-2e<0) {tag}", res.prob_lower_event, floor))
    return SuiteResult("lemma1", checks, time.perf_counter() - t0)


def suite_tailbound(seed=0, trials=10_000, kappas=(0.05, 0.2, 0.5)) -> SuiteResult:
    """Hoeffding coverage >= 1 - kappa for several retention patterns."""
    t0 = time.perf_counter()
    world, e_hat, p_hat = default_study(seed)
    n = world.num_pairs
    obs = sim.observation_matrix(world, trials, seed)
    patterns = {
        "all-0": np.zeros(n),
        "all-1": np.ones(n),
        "oracle": est.oracle_gamma(world.reference_errors, e_hat),
        "random": (substream(seed, "tail-gamma").random(n) < 0.5).astype(np.float64),
    }
    checks = []
    for (name, gamma), kappa in itertools.product(patterns.items(), kappas):
        coverage, _ = sim.verify_tail_bound(world, e_hat, p_hat, gamma, kappa, trials, seed, observations=obs)
        checks.append(at_least(f"coverage gamma={name} kappa={kappa}", coverage, 1.0 - kappa))
    return SuiteResult("tailbound", checks, time.perf_counter() - t0)


def random_instance(rng, max_pairs=50):
    """Random estimator inputs with frozen errors, true and estimated propensities."""
    n = int(rng.integers(1, max_pairs + 1))
    e = rng.uniform(0.0, 2.0, n)
    e_hat = e * np.exp(rng.normal(0.0, 1.0, n))
    p_true = rng.uniform(0.05, 1.0, n)
    p_hat = rng.uniform(0.05, 1.0, n)
    return est.EstimatorInputs(e=e, e_hat=e_hat, p_hat=p_hat, p_true=p_true,
                               gamma=est.oracle_gamma(e, e_hat))


def suite_corollary(seed=0, instances=10_000, kappa=0.05) -> SuiteResult:
    """Oracle-filtered CDR variance and tail bound never exceed IPS or DR."""
    t0 = time.perf_counter()
    rng = substream(seed, "corollary")
    worst_var = worst_bound = -math.inf
    for _ in range(instances):
        inputs = random_instance(rng)
        v = est.cdr_variance(inputs)
        worst_var = max(worst_var, v - min(est.ips_variance(inputs), est.dr_variance(inputs)))
        b = est.cdr_tail_bound(inputs, kappa)
        worst_bound = max(worst_bound, b - min(est.ips_tail_bound(inputs, kappa),
                                               est.dr_tail_bound(inputs, kappa)))
    checks = [
        at_most(f"max cdr_variance - min(ips, dr) over {instances} instances", worst_var, 0.0),
        at_most(f"max cdr_tail_bound - min(ips, dr) over {instances} instances", worst_bound, 0.0),
    ]
    return SuiteResult("corollary", checks, time.perf_counter() - t0)


SUITES = {
    "formulas": suite_formulas,
    "lemma1": suite_lemma1,
    "tailbound": suite_tailbound,
    "corollary": suite_corollary,
}


def run_suite(name, seed=0) -> SuiteResult:
    try:
        fn = SUITES[name]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}") from None
    return fn(seed=seed)
