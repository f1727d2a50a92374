"""Joint training of the recommendation and imputation models.

One recommendation step and one imputation step alternate on each batch.
The imputation model outputs a pseudo-label y_imp and the imputed error is
``e_hat = loss(label=y_imp, prediction=r_hat)``; the recommendation step
treats y_imp as fixed, the imputation step treats e and r_hat as fixed.
"""
from __future__ import annotations

import csv
import enum
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import estimators as est
from ._rng import substream
from .datamodel import RatingTable
from .filter import FilterConfig, decide, mc_dropout_stats
from .metrics import auc
from .models import AdamState, FactorModel, LossKind, PropensityTable, adam_step, error_from_logit, sigmoid


class Method(str, enum.Enum):
    NAIVE = "naive"
    IPS = "ips"
    EIB = "eib"
    DRJL = "drjl"

    @property
    def uses_imputation(self):
        return self in (Method.EIB, Method.DRJL)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.DRJL
    cdr_enabled: bool = False
    eta: float = 5.0
    learning_rate: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 512
    epochs: int = 100
    dim: int = 8
    loss_kind: LossKind = LossKind.BCE
    seed: int = 0
    propensity_source: str = "popularity"
    patience: int = 5
    dropout_passes: int = 10
    dropout_rate: float = 0.5

    def __post_init__(self):
        try:
            object.__setattr__(self, "method", Method(self.method))
        except ValueError:
            raise ConfigError(f"method: unknown value {self.method!r}") from None
        try:
            object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        except ValueError:
            raise ConfigError(f"loss_kind: unknown value {self.loss_kind!r}") from None
        if self.propensity_source not in ("popularity", "oracle", "file"):
            raise ConfigError(f"propensity_source: unknown value {self.propensity_source!r}")
        for name in ("learning_rate", "eta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("batch_size", "epochs", "dim", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be at least 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be non-negative")

    def filter_config(self):
        return FilterConfig(self.eta, self.dropout_passes, self.dropout_rate, self.seed)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    retained_fraction: float


@dataclass
class TrainResult:
    recommendation_model: FactorModel
    imputation_model: Optional[FactorModel]
    history: list = field(default_factory=list)
    wall_time: float = 0.0
    best_epoch: int = 0

    def write_history(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_auc", "retained_fraction"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc),
                            "" if math.isnan(r.retained_fraction) else repr(r.retained_fraction)])


class TrainingError(RuntimeError):
    pass


# batch objectives ---------------------------------------------------------

def recommendation_objective(method, model, users, items, o, labels, p_hat,
                             y_imp=None, gamma=None, loss_kind=LossKind.BCE):
    """Batch loss of the recommendation model and its parameter gradients.

    The loss value comes from the matching estimator in :mod:`cdr.estimators`
    over the batch (naive, IPS, EIB, or CDR, which is DR when gamma is all 1).
    """
    method = Method(method)
    n = len(users)
    o = np.asarray(o, dtype=np.float64)
    z = model.logits(users, items)
    e, de, _ = error_from_logit(labels, z, loss_kind)
    e = np.where(o == 1, e, 0.0)
    de = np.where(o == 1, de, 0.0)
    if method.uses_imputation:
        e_hat, de_hat, _ = error_from_logit(y_imp, z, loss_kind)
        g = np.ones(n) if gamma is None else np.asarray(gamma, dtype=np.float64)
        inputs = est.EstimatorInputs(e=e, e_hat=e_hat, p_hat=p_hat, o=o, gamma=g)
        if method is Method.EIB:
            loss = est.eib_loss(inputs)
            dz = o * de + g * (1.0 - o) * de_hat
        else:
            loss = est.cdr_loss(inputs)
            dz = o * de / p_hat + g * (1.0 - o / p_hat) * de_hat
    else:
        inputs = est.EstimatorInputs(e=e, p_hat=p_hat, o=o)
        if method is Method.NAIVE:
            loss = est.naive_loss(inputs)
            dz = o * de
        else:
            loss = est.ips_loss(inputs)
            dz = o * de / p_hat
    return loss, model.backprop(users, items, dz / n)


def imputation_objective(model, users, items, o, e, r_logit, p_hat, loss_kind=LossKind.BCE):
    """mean(o * (e_hat - e)^2 / p_hat) over the batch and gradients w.r.t. the
    imputation model, with e and the recommendation logits held fixed."""
    n = len(users)
    o = np.asarray(o, dtype=np.float64)
    e = np.where(o == 1, e, 0.0)
    y = sigmoid(model.logits(users, items))
    e_hat, _, d_label = error_from_logit(y, r_logit, loss_kind)
    resid = e_hat - e
    loss = est.compensated_sum(o * resid * resid / p_hat) / n
    dz = o * 2.0 * resid / p_hat * d_label * y * (1.0 - y)
    return loss, model.backprop(users, items, dz / n)


# training loop ------------------------------------------------------------

def _check_finite(value, what):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what}")


def train(data: RatingTable, validation: RatingTable, propensities: PropensityTable,
          config: TrainConfig) -> TrainResult:
    """Fit the recommendation model (and imputation model for EIB/DRJL).

    Early-stops on validation AUC with ``config.patience`` and returns the
    best-epoch models.
    """
    t0 = time.perf_counter()
    method = config.method
    nu, ni = data.num_users, data.num_items
    obs_mask = data.observed
    if not obs_mask.any():
        raise TrainingError("training data has no observed records")
    if propensities.values.shape != (nu, ni):
        raise TrainingError("propensity table does not match the data universe")

    init_rng = substream(config.seed, "init")
    rec = FactorModel.init(nu, ni, config.dim, init_rng)
    rec_state = AdamState.like(rec)
    imp = imp_state = None
    if method.uses_imputation:
        imp = FactorModel.init(nu, ni, config.dim, init_rng)
        imp_state = AdamState.like(imp)

    obs_users = data.users[obs_mask]
    obs_items = data.items[obs_mask]
    obs_labels = data.values[obs_mask]
    label_grid = np.zeros((nu, ni))
    label_grid[obs_users, obs_items] = obs_labels
    o_grid = np.zeros((nu, ni))
    o_grid[obs_users, obs_items] = 1.0
    fcfg = config.filter_config()

    history = []
    best = (-math.inf, rec.copy(), None if imp is None else imp.copy(), 0)
    stale = 0
    for epoch in range(config.epochs):
        batch_rng = substream(config.seed, "batches", epoch)
        if method.uses_imputation:
            perm = batch_rng.permutation(nu * ni)
            pool_users, pool_items = perm // ni, perm % ni
        else:
            perm = batch_rng.permutation(len(obs_users))
            pool_users, pool_items = obs_users[perm], obs_items[perm]
        losses, kept, seen = [], 0.0, 0
        for step, start in enumerate(range(0, len(pool_users), config.batch_size)):
            users = pool_users[start:start + config.batch_size]
            items = pool_items[start:start + config.batch_size]
            o = o_grid[users, items]
            labels = label_grid[users, items]
            p_hat = propensities.lookup(users, items)
            y_imp = gamma = None
            if method.uses_imputation:
                y_imp = imp.predict_many(users, items)
                if config.cdr_enabled:
                    r_hat = rec.predict_many(users, items)
                    stats = mc_dropout_stats(imp, users, items, fcfg, predictions=r_hat,
                                             loss_kind=config.loss_kind,
                                             rng=substream(config.seed, "dropout", epoch, step))
                    gamma = decide(stats, config.eta)
                else:
                    gamma = np.ones(len(users))
                kept += float(gamma.sum())
                seen += len(users)
            loss, grads = recommendation_objective(method, rec, users, items, o, labels, p_hat,
                                                   y_imp, gamma, config.loss_kind)
            _check_finite(loss, "recommendation loss")
            adam_step(rec, grads, rec_state, config.learning_rate, config.weight_decay)
            losses.append(loss)
            if method.uses_imputation and o.any():
                r_logit = rec.logits(users, items)
                e, _, _ = error_from_logit(labels, r_logit, config.loss_kind)
                iloss, igrads = imputation_objective(imp, users, items, o, e, r_logit, p_hat,
                                                     config.loss_kind)
                _check_finite(iloss, "imputation loss")
                adam_step(imp, igrads, imp_state, config.learning_rate, config.weight_decay)
        val_auc = auc(rec.predict_many(validation.users, validation.items), validation.values)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_auc,
                                   kept / seen if seen else math.nan))
        if val_auc > best[0]:
            best = (val_auc, rec.copy(), None if imp is None else imp.copy(), epoch)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(best[1], best[2], history, time.perf_counter() - t0, best[3])
