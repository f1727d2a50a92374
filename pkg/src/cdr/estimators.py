"""Loss estimators over a pair set and their closed-form moments.

All functions are pure over :class:`EstimatorInputs`. Sums use Neumaier
compensation in pair order, and the IPS, DR and CDR losses share one
per-pair expression::

    o * e / p_hat + gamma * e_hat * (1 - o / p_hat)

with gamma fixed to 0 (IPS) or 1 (DR). Hence ``cdr_loss`` with gamma all 0
or all 1 reproduces ``ips_loss`` / ``dr_loss`` bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .kernels import compensated_sum


class EstimatorInputError(ValueError):
    pass


def _vec(x, name):
    if x is None:
        return None
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    return a


@dataclass(frozen=True, eq=False)
class EstimatorInputs:
    """Aligned per-pair vectors.

    e       : prediction errors e_ui >= 0
    e_hat   : imputed errors
    p_hat   : estimated propensities in (0, 1]
    o       : 0/1 observation indicators
    gamma   : 0/1 imputation-retention flags
    p_true  : true propensities (oracle studies only)
    pairs   : optional (n, 2) array of (user, item)
    """

    e: np.ndarray
    e_hat: Optional[np.ndarray] = None
    p_hat: Optional[np.ndarray] = None
    o: Optional[np.ndarray] = None
    gamma: Optional[np.ndarray] = None
    p_true: Optional[np.ndarray] = None
    pairs: Optional[np.ndarray] = None
    floor: float = 0.0

    def __post_init__(self):
        n = None
        for name in ("e", "e_hat", "p_hat", "o", "gamma", "p_true"):
            a = _vec(getattr(self, name), name)
            if a is None:
                continue
            if n is None:
                n = len(a)
            elif len(a) != n:
                raise EstimatorInputError(f"{name} has length {len(a)}, expected {n}")
            object.__setattr__(self, name, a)
        if self.pairs is not None and len(self.pairs) != n:
            raise EstimatorInputError("pairs length differs from the vectors")
        if self.p_hat is not None:
            lo = self.floor if self.floor > 0 else 0.0
            if np.any(~(self.p_hat > 0)) or np.any(self.p_hat < lo) or np.any(self.p_hat > 1):
                raise EstimatorInputError("p_hat must lie in [floor, 1] with floor > 0")
        for name in ("o", "gamma"):
            a = getattr(self, name)
            if a is not None and np.any((a != 0) & (a != 1)):
                raise EstimatorInputError(f"{name} must be binary")

    def __len__(self):
        return len(self.e)

    def replace(self, **changes) -> "EstimatorInputs":
        fields = {k: getattr(self, k) for k in
                  ("e", "e_hat", "p_hat", "o", "gamma", "p_true", "pairs", "floor")}
        fields.update(changes)
        return EstimatorInputs(**fields)


def _need(inputs, *names):
    for name in names:
        if getattr(inputs, name) is None:
            raise EstimatorInputError(f"estimator requires {name}")
    if len(inputs) == 0:
        raise EstimatorInputError("empty pair set")


def _mean(terms):
    return compensated_sum(terms) / float(len(terms))


def _cdr_terms(o, e, e_hat, p_hat, gamma):
    return o * e / p_hat + gamma * e_hat * (1.0 - o / p_hat)


def _gamma_or(inputs, fill):
    if fill is None:
        _need(inputs, "gamma")
        return inputs.gamma
    return np.full(len(inputs), fill)


def ideal_loss(inputs: EstimatorInputs) -> float:
    _need(inputs, "e")
    return _mean(inputs.e)


def naive_loss(inputs: EstimatorInputs) -> float:
    _need(inputs, "o")
    return _mean(inputs.o * inputs.e)


def ips_loss(inputs: EstimatorInputs) -> float:
    _need(inputs, "o", "p_hat")
    zeros = np.zeros(len(inputs))
    return _mean(_cdr_terms(inputs.o, inputs.e, zeros, inputs.p_hat, zeros))


def dr_loss(inputs: EstimatorInputs) -> float:
    _need(inputs, "o", "p_hat", "e_hat")
    return _mean(_cdr_terms(inputs.o, inputs.e, inputs.e_hat, inputs.p_hat, np.ones(len(inputs))))


def cdr_loss(inputs: EstimatorInputs) -> float:
    _need(inputs, "o", "p_hat", "e_hat", "gamma")
    return _mean(_cdr_terms(inputs.o, inputs.e, inputs.e_hat, inputs.p_hat, inputs.gamma))


def eib_loss(inputs: EstimatorInputs) -> float:
    """Error-imputation loss: observed errors plus retained imputations elsewhere."""
    _need(inputs, "o", "e_hat")
    gamma = inputs.gamma if inputs.gamma is not None else np.ones(len(inputs))
    return _mean(inputs.o * inputs.e + gamma * (1.0 - inputs.o) * inputs.e_hat)


# closed-form moments ------------------------------------------------------

def _residual(inputs, gamma):
    e_hat = inputs.e_hat if inputs.e_hat is not None else np.zeros(len(inputs))
    return gamma * (inputs.e - e_hat) + (1.0 - gamma) * inputs.e


def _bias(inputs, gamma):
    _need(inputs, "p_true", "p_hat")
    p, ph = inputs.p_true, inputs.p_hat
    return abs(compensated_sum((p - ph) / ph * _residual(inputs, gamma))) / len(inputs)


def _variance(inputs, gamma):
    _need(inputs, "p_true", "p_hat")
    p, ph = inputs.p_true, inputs.p_hat
    e_hat = inputs.e_hat if inputs.e_hat is not None else np.zeros(len(inputs))
    sq = gamma * (e_hat - inputs.e) ** 2 + (1.0 - gamma) * inputs.e ** 2
    return compensated_sum(p * (1.0 - p) / ph ** 2 * sq) / float(len(inputs)) ** 2


def ips_bias(inputs):
    return _bias(inputs, np.zeros(len(inputs)))


def ips_variance(inputs):
    return _variance(inputs, np.zeros(len(inputs)))


def dr_bias(inputs):
    _need(inputs, "e_hat")
    return _bias(inputs, np.ones(len(inputs)))


def dr_variance(inputs):
    _need(inputs, "e_hat")
    return _variance(inputs, np.ones(len(inputs)))


def cdr_bias(inputs):
    _need(inputs, "e_hat", "gamma")
    return _bias(inputs, inputs.gamma)


def cdr_variance(inputs):
    _need(inputs, "e_hat", "gamma")
    return _variance(inputs, inputs.gamma)


def cdr_expectation(inputs, gamma=None) -> float:
    """E_o[L_CDR] under o ~ Bernoulli(p_true); gamma defaults to ``inputs.gamma``."""
    _need(inputs, "p_true", "p_hat")
    g = inputs.gamma if gamma is None else np.broadcast_to(np.asarray(gamma, float), (len(inputs),))
    e_hat = inputs.e_hat if inputs.e_hat is not None else np.zeros(len(inputs))
    return _mean(_cdr_terms(inputs.p_true, inputs.e, e_hat, inputs.p_hat, g))


def cdr_tail_bound(inputs: EstimatorInputs, kappa: float) -> float:
    """Hoeffding half-width holding with probability 1 - kappa."""
    _need(inputs, "p_hat", "e_hat", "gamma")
    if not 0.0 < kappa < 1.0:
        raise EstimatorInputError("kappa must lie in (0, 1)")
    g, e, eh, ph = inputs.gamma, inputs.e, inputs.e_hat, inputs.p_hat
    total = compensated_sum(g * (e - eh) ** 2 / ph ** 2 + (1.0 - g) * e ** 2 / ph ** 2)
    return math.sqrt(math.log(2.0 / kappa) / (2.0 * float(len(inputs)) ** 2) * total)


def ips_tail_bound(inputs, kappa):
    zeros = np.zeros(len(inputs))
    eh = inputs.e_hat if inputs.e_hat is not None else zeros
    return cdr_tail_bound(inputs.replace(gamma=zeros, e_hat=eh), kappa)


def dr_tail_bound(inputs, kappa):
    return cdr_tail_bound(inputs.replace(gamma=np.ones(len(inputs))), kappa)


def oracle_gamma(e, e_hat):
    """Retain exactly the non-poisonous imputations: |e_hat - e| < e."""
    e = np.asarray(e, dtype=np.float64)
    return (np.abs(np.asarray(e_hat, dtype=np.float64) - e) < e).astype(np.float64)


def poisonous_ratio(e, e_hat) -> float:
    """Fraction of pairs whose imputation satisfies |e_hat - e| > e."""
    e = np.asarray(e, dtype=np.float64).reshape(-1)
    e_hat = np.asarray(e_hat, dtype=np.float64).reshape(-1)
    if len(e) != len(e_hat):
        raise EstimatorInputError("e and e_hat differ in length")
    if len(e) == 0:
        raise EstimatorInputError("empty pair set")
    return float(np.count_nonzero(np.abs(e_hat - e) > e)) / len(e)


@dataclass
class EstimatorReport:
    value: float
    bias: Optional[float] = None
    variance: Optional[float] = None
    tail_bound: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


_LOSSES = {"naive": naive_loss, "ips": ips_loss, "dr": dr_loss, "cdr": cdr_loss, "eib": eib_loss}
_MOMENTS = {"ips": (ips_bias, ips_variance), "dr": (dr_bias, dr_variance), "cdr": (cdr_bias, cdr_variance)}
_BOUNDS = {"ips": ips_tail_bound, "dr": dr_tail_bound, "cdr": cdr_tail_bound}


def report(inputs: EstimatorInputs, estimator: str = "cdr", kappa: Optional[float] = None) -> EstimatorReport:
    """Value plus, where available, closed-form bias/variance and tail bound."""
    out = EstimatorReport(_LOSSES[estimator](inputs))
    if inputs.p_true is not None and estimator in _MOMENTS:
        bias_fn, var_fn = _MOMENTS[estimator]
        out.bias = bias_fn(inputs)
        out.variance = var_fn(inputs)
    if kappa is not None and estimator in _BOUNDS:
        out.tail_bound = _BOUNDS[estimator](inputs, kappa)
    return out
