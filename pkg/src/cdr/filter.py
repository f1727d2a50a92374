"""Imputation filter: MC-dropout statistics, the ratio test, and the
theoretical threshold it stands in for."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._rng import substream
from .models import FactorModel, LossKind, pointwise_error, sigmoid

SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class ImputationStats:
    mu_hat: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu_hat) != np.shape(self.sigma_hat):
            raise ValueError("mu_hat and sigma_hat differ in length")
        if np.any(np.asarray(self.sigma_hat) < 0):
            raise ValueError("sigma_hat must be non-negative")

    def __len__(self):
        return len(self.mu_hat)


@dataclass(frozen=True)
class FilterConfig:
    eta: float = 1.0
    passes: int = 10
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("at least two dropout passes are needed for a standard deviation")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in (0, 1)")
        if not self.eta > 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class TheoryParams:
    rho: float
    eps_mu: float = 0.0
    eps_sigma: float = 0.0
    M_mu: float = 1.0
    m_sigma: float = 1.0
    m_mu: float = 0.0  # carried for completeness; the threshold does not use it

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps_mu < 0 or self.eps_sigma < 0:
            raise ValueError("eps_mu and eps_sigma must be non-negative")
        if not self.m_sigma > 0:
            raise ValueError("m_sigma must be positive")
        if self.M_mu < self.m_mu:
            raise ValueError("M_mu must be at least m_mu")


def mc_dropout_stats(model: FactorModel, users, items, config: FilterConfig,
                     predictions=None, loss_kind=LossKind.BCE, rng=None) -> ImputationStats:
    """Mean and sample standard deviation of the imputation over dropout passes.

    Each pass draws one mask over embedding dimensions, shared by every pair,
    keeps a dimension with probability ``1 - dropout_rate`` and rescales the
    kept ones by ``1 / (1 - dropout_rate)``. With ``predictions`` given, the
    statistic is the imputed error ``loss(label=imputed, prediction)``;
    otherwise it is the imputation model's output itself.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    if rng is None:
        rng = substream(config.seed, "dropout")
    keep = 1.0 - config.dropout_rate
    scales = np.stack([(rng.random(model.dim) < keep) / keep for _ in range(config.passes)])
    products = model.user_embeddings[users] * model.item_embeddings[items]
    bias = model.user_bias[users] + model.item_bias[items] + model.global_bias[0]
    samples = sigmoid(scales @ products.T + bias)
    if predictions is not None:
        samples = pointwise_error(samples, predictions, loss_kind)
    flat = np.ptp(samples, axis=0) == 0
    mu = np.where(flat, samples[0], samples.mean(axis=0))
    sigma = np.where(flat, 0.0, samples.std(axis=0, ddof=1))
    return ImputationStats(mu, sigma)


def decide(stats: ImputationStats, eta: float) -> np.ndarray:
    """gamma = 1 where mu_hat > 0 and sigma_hat / mu_hat < eta, else 0."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    mu = np.asarray(stats.mu_hat, dtype=np.float64)
    sigma = np.asarray(stats.sigma_hat, dtype=np.float64)
    pos = mu > 0
    with np.errstate(over="ignore"):
        ratio = np.divide(sigma, mu, out=np.full_like(mu, np.inf), where=pos)
    return (pos & (ratio < eta)).astype(np.float64)


# Acklam's rational approximation to the normal quantile
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(rho: float) -> float:
    """Standard normal quantile: rational approximation plus one Newton step."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if rho > 0.5:
        # 1 - rho is exact here, and the lower tail keeps full relative precision
        return -normal_quantile(1.0 - rho)
    if rho == 0.5:
        return 0.0
    x = _acklam(rho)
    density = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return x - (normal_cdf(x) - rho) / density


def threshold_denominator(params: TheoryParams) -> float:
    m, es = params.m_sigma, params.eps_sigma
    return (SQRT5 * normal_quantile(params.rho)
            + 2.0 * params.M_mu * es / (m * (SQRT5 * m + 2.0 * es))
            + 2.0 * SQRT5 * params.eps_mu / (SQRT5 * m + 2.0 * es))


def theoretical_threshold(params: TheoryParams) -> float:
    """Largest sigma_hat / mu_hat for which the retention guarantee at level rho holds.

    Returns ``inf`` when the guarantee holds for every ratio.
    """
    denom = threshold_denominator(params)
    if denom <= 0:
        return math.inf
    return 1.0 / denom


def export_decisions(path, users, items, stats: ImputationStats, gamma) -> None:
    """TSV with header ``user item mu_hat sigma_hat gamma``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user\titem\tmu_hat\tsigma_hat\tgamma\n")
        for u, i, m, s, g in zip(np.asarray(users).tolist(), np.asarray(items).tolist(),
                                 np.asarray(stats.mu_hat).tolist(),
                                 np.asarray(stats.sigma_hat).tolist(),
                                 np.asarray(gamma).tolist()):
            fh.write(f"{u}\t{i}\t{m!r}\t{s!r}\t{int(g)}\n")
