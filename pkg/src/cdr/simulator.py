"""Synthetic worlds with known labels and propensities, and Monte Carlo
checks of the closed-form estimator moments."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import estimators as est
from ._rng import substream
from .datamodel import RatingTable
from .kernels import cdr_trial_losses, compensated_sum
from .models import LossKind, pointwise_error, sigmoid


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    """Full ground truth over a num_users x num_items universe, flattened row-major."""

    num_users: int
    num_items: int
    labels: np.ndarray
    p_true: np.ndarray
    floor: float = 0.005
    preference: Optional[np.ndarray] = None  # true P(label = 1)
    reference_errors: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.num_users * self.num_items
        if self.labels.shape != (n,) or self.p_true.shape != (n,):
            raise ValueError("labels and p_true must cover every pair")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be binary")
        if np.any(self.p_true < self.floor) or np.any(self.p_true > 1):
            raise ValueError("p_true must lie in [floor, 1]")

    @property
    def num_pairs(self):
        return self.num_users * self.num_items

    @property
    def users(self):
        return np.repeat(np.arange(self.num_users), self.num_items)

    @property
    def items(self):
        return np.tile(np.arange(self.num_items), self.num_users)

    def table(self, observed=None) -> RatingTable:
        """All pairs with their labels; ``observed`` sets the o flags."""
        return RatingTable(self.num_users, self.num_items, self.users, self.items,
                           self.labels, observed)

    def observed_table(self, obs) -> RatingTable:
        idx = np.flatnonzero(np.asarray(obs))
        return RatingTable(self.num_users, self.num_items, self.users[idx],
                           self.items[idx], self.labels[idx])

    def propensity_matrix(self):
        return self.p_true.reshape(self.num_users, self.num_items)


def _calibrate_scale(weights, target, floor):
    """p0 such that mean(clip(p0 * weights, floor, 1)) == target."""
    lo, hi = 0.0, target / weights.min() + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.clip(mid * weights, floor, 1.0).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_world(num_users=30, num_items=30, seed=0, bias_strength=2.0, rank=3,
               mean_propensity=0.05, positive_rate=0.3, signal=2.5, floor=0.005) -> SyntheticWorld:
    """Low-rank preference labels with rating-dependent observation propensities.

    ``p_true = clip(p0 * exp(bias_strength * (label - 0.5)), floor, 1)``, with
    p0 calibrated so the mean propensity equals ``mean_propensity``.
    """
    if num_users < 1 or num_items < 1:
        raise ValueError("world dimensions must be positive")
    rng = substream(seed, "simulator")
    u = rng.normal(size=(num_users, rank))
    v = rng.normal(size=(num_items, rank))
    score = (u @ v.T).ravel() / math.sqrt(rank)
    offset = math.log(positive_rate / (1.0 - positive_rate))
    preference = sigmoid(signal * score + offset)
    labels = (rng.random(preference.shape) < preference).astype(np.float64)
    if bias_strength == 0:
        p_true = np.full(labels.shape, float(np.clip(mean_propensity, floor, 1.0)))
    else:
        weights = np.exp(bias_strength * (labels - 0.5))
        p0 = _calibrate_scale(weights, mean_propensity, floor)
        p_true = np.clip(p0 * weights, floor, 1.0)
    return SyntheticWorld(num_users, num_items, labels, p_true, floor, preference)


def draw_observations(world: SyntheticWorld, seed, trial=0) -> np.ndarray:
    """Independent Bernoulli(p_true) indicators for one trial, as uint8."""
    rng = substream(seed, "observations", trial)
    return (rng.random(world.num_pairs) < world.p_true).astype(np.uint8)


def observation_matrix(world, trials, seed) -> np.ndarray:
    """(trials, pairs) indicators; row t equals ``draw_observations(world, seed, t)``."""
    out = np.empty((trials, world.num_pairs), dtype=np.uint8)
    for t in range(trials):
        out[t] = draw_observations(world, seed, t)
    return out


def with_reference_errors(world: SyntheticWorld, seed, noise=1.0, kind=LossKind.BCE) -> SyntheticWorld:
    """Freeze e_ui as the error of a noisy version of the true preference."""
    rng = substream(seed, "reference-errors")
    logit = np.log(world.preference) - np.log1p(-world.preference)
    pred = sigmoid(logit + noise * rng.normal(size=world.num_pairs))
    return replace(world, reference_errors=pointwise_error(world.labels, pred, kind))


def noisy_imputation(e, seed, spread=0.8):
    """e_hat = e * exp(spread * z): unbiased in log scale, sometimes poisonous."""
    rng = substream(seed, "imputation")
    return np.asarray(e) * np.exp(spread * rng.normal(size=len(e)))


def noisy_propensity(world: SyntheticWorld, seed, spread=0.25):
    """p_hat = clip(p * exp(spread * z), floor, 1)."""
    rng = substream(seed, "propensity-estimate")
    return np.clip(world.p_true * np.exp(spread * rng.normal(size=world.num_pairs)), world.floor, 1.0)


@dataclass
class MonteCarloReport:
    estimator: str
    trials: int
    empirical_mean: float
    empirical_variance: float
    closed_form_bias: float
    closed_form_variance: float
    standard_error: float
    ideal_loss: float
    expected_value: float
    variance_standard_error: float

    @property
    def empirical_bias(self):
        return abs(self.empirical_mean - self.ideal_loss)

    @property
    def mean_z(self):
        """Standardized gap between empirical and closed-form expectation."""
        se = math.sqrt(self.closed_form_variance / self.trials)
        gap = self.empirical_mean - self.expected_value
        return 0.0 if gap == 0 else (math.inf if se == 0 else gap / se)

    @property
    def variance_z(self):
        gap = self.empirical_variance - self.closed_form_variance
        if gap == 0:
            return 0.0
        return math.inf if self.variance_standard_error == 0 else gap / self.variance_standard_error

    def to_json(self):
        return json.dumps(asdict(self))


def _estimator_inputs(world, e_hat, p_hat, gamma, estimator):
    n = world.num_pairs
    e = world.reference_errors
    if e is None:
        raise ValueError("world has no frozen reference errors")
    if estimator == "ips":
        gamma = np.zeros(n)
        e_hat = np.zeros(n) if e_hat is None else e_hat
    elif estimator == "dr":
        gamma = np.ones(n)
    elif estimator != "cdr":
        raise ValueError(f"unknown estimator {estimator!r}")
    return est.EstimatorInputs(e=e, e_hat=e_hat, p_hat=p_hat, gamma=gamma,
                               p_true=world.p_true, floor=world.floor)


def trial_losses(inputs: est.EstimatorInputs, obs):
    return cdr_trial_losses(obs, inputs.e, inputs.e_hat, inputs.p_hat, inputs.gamma)


def empirical_moments(estimator, world, e_hat, p_hat, gamma=None, trials=10_000, seed=0,
                      observations=None) -> MonteCarloReport:
    """Monte Carlo mean/variance of IPS, DR or CDR over fresh observation draws.

    Pass ``observations`` to reuse one set of draws across estimators.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    inputs = _estimator_inputs(world, e_hat, p_hat, gamma, estimator)
    obs = observation_matrix(world, trials, seed) if observations is None else observations
    values = trial_losses(inputs, obs)
    n = len(values)
    mean = compensated_sum(values) / n
    dev = values - mean
    var = compensated_sum(dev * dev) / (n - 1)
    m4 = compensated_sum(dev ** 4) / n
    var_se = math.sqrt(max(m4 - var * var * (n - 3) / (n - 1), 0.0) / n)
    return MonteCarloReport(
        estimator=estimator,
        trials=n,
        empirical_mean=mean,
        empirical_variance=var,
        closed_form_bias=est.cdr_bias(inputs),
        closed_form_variance=est.cdr_variance(inputs),
        standard_error=math.sqrt(var / n),
        ideal_loss=est.ideal_loss(inputs),
        expected_value=est.cdr_expectation(inputs),
        variance_standard_error=var_se,
    )


@dataclass
class Lemma1Result:
    prob_within: float       # P(|e_hat - e| < e)
    prob_lower_event: float  # P(e_hat - 2 e < 0)
    draws: int

    def standard_error(self, rho):
        return math.sqrt(rho * (1.0 - rho) / self.draws)


def verify_lemma1(mu_hat, sigma_hat, eps_mu, eps_sigma, rho=None, draws=100_000, seed=0,
                  mu=None, sigma=None) -> Lemma1Result:
    """Empirical retention probability under the worst-case true error law.

    e_hat ~ N(mu_hat, sigma_hat^2) and, independently, e ~ N(mu, sigma^2) with
    by default mu = mu_hat - eps_mu and sigma^2 = sigma_hat^2 + eps_sigma^2.
    """
    if draws < 10_000:
        raise ValueError("use at least 10^4 draws")
    if mu is None:
        mu = mu_hat - eps_mu
    if sigma is None:
        sigma = math.sqrt(sigma_hat ** 2 + eps_sigma ** 2)
    rng = substream(seed, "lemma1")
    e_hat = rng.normal(mu_hat, sigma_hat, size=draws)
    e = rng.normal(mu, sigma, size=draws)
    within = np.count_nonzero(np.abs(e_hat - e) < e) / draws
    lower = np.count_nonzero(e_hat - 2.0 * e < 0) / draws
    return Lemma1Result(float(within), float(lower), draws)


def verify_tail_bound(world, e_hat, p_hat, gamma, kappa, trials=10_000, seed=0, observations=None):
    """Share of trials whose CDR loss lies within the Hoeffding half-width of the mean.

    Deviations are compared with a relative slack of 1e-12 so that rounding
    alone never counts as a miss. Returns (coverage, bound).
    """
    inputs = _estimator_inputs(world, e_hat, p_hat, gamma, "cdr")
    bound = est.cdr_tail_bound(inputs, kappa)
    obs = observation_matrix(world, trials, seed) if observations is None else observations
    values = trial_losses(inputs, obs)
    center = compensated_sum(values) / len(values)
    slack = 1e-12 * max(1.0, abs(center))  # rounding in the per-trial sums
    return float(np.mean(np.abs(values - center) <= bound + slack)), bound


def export_world(world: SyntheticWorld, stem, obs=None):
    """Write ``<stem>.tsv`` (triplets, with o flags when ``obs`` is given) and
    ``<stem>.propensity.tsv``."""
    from .datamodel import write_triplets

    write_triplets(world.table(None if obs is None else np.asarray(obs, bool)), f"{stem}.tsv")
    with open(f"{stem}.propensity.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, i, p in zip(world.users.tolist(), world.items.tolist(), world.p_true.tolist()):
            fh.write(f"{u}\t{i}\t{p!r}\n")


def experiment_tables(world: SyntheticWorld, seed, unbiased_fraction=0.2, validation_fraction=0.1):
    """Biased training table plus unbiased validation/test tables.

    Training records are one Bernoulli(p_true) draw. The unbiased set is a
    uniform sample of pairs with their true labels, split like real data.
    """
    from .datamodel import SplitSpec, split_unbiased

    train = world.observed_table(draw_observations(world, seed))
    rng = substream(seed, "unbiased-sample")
    n = max(2, int(round(unbiased_fraction * world.num_pairs)))
    idx = np.sort(rng.choice(world.num_pairs, size=n, replace=False))
    unbiased = world.table().subset(idx)
    val, test = split_unbiased(unbiased, SplitSpec(validation_fraction, seed))
    return train, val, test
