"""Biased matrix factorization, pointwise errors, Adam and propensity estimates.

The same :class:`FactorModel` serves as recommendation model (predicting
r_ui) and as imputation model (predicting a pseudo-label from which the
imputed error is derived).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLAMP_EPS = 1e-7
CHECKPOINT_FORMAT = "cdr-factor-model"
CHECKPOINT_VERSION = 1

PARAM_NAMES = ("user_embeddings", "item_embeddings", "user_bias", "item_bias", "global_bias")


class LossKind(str, enum.Enum):
    BCE = "bce"
    RMSE = "rmse"


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


@dataclass
class FactorModel:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    user_bias: np.ndarray
    item_bias: np.ndarray
    global_bias: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        self.global_bias = self.global_bias.reshape(1)
        if not all(np.all(np.isfinite(getattr(self, n))) for n in PARAM_NAMES):
            raise ValueError("model parameters must be finite")
        if self.user_embeddings.ndim != 2 or self.item_embeddings.ndim != 2:
            raise ValueError("embeddings must be 2-D")
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1] or self.dim < 1:
            raise ValueError("embedding dimensions must match and be >= 1")
        if self.user_bias.shape != (self.num_users,) or self.item_bias.shape != (self.num_items,):
            raise ValueError("bias shapes do not match the embedding tables")

    @classmethod
    def init(cls, num_users, num_items, dim, rng, scale=0.01):
        """Uniform(-scale, scale) embeddings, zero biases."""
        return cls(
            rng.uniform(-scale, scale, size=(num_users, dim)),
            rng.uniform(-scale, scale, size=(num_items, dim)),
            np.zeros(num_users),
            np.zeros(num_items),
            np.zeros(1),
        )

    @classmethod
    def zeros(cls, num_users, num_items, dim):
        return cls(np.zeros((num_users, dim)), np.zeros((num_items, dim)),
                   np.zeros(num_users), np.zeros(num_items), np.zeros(1))

    @property
    def num_users(self):
        return self.user_embeddings.shape[0]

    @property
    def num_items(self):
        return self.item_embeddings.shape[0]

    @property
    def dim(self):
        return self.user_embeddings.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return FactorModel(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def check_index(self, users, items):
        users = np.asarray(users)
        items = np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of bounds")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of bounds")

    def logits(self, users, items, dim_scale=None):
        """Pre-sigmoid scores. ``dim_scale`` multiplies each embedding dimension."""
        u = self.user_embeddings[users]
        v = self.item_embeddings[items]
        if dim_scale is not None:
            u = u * dim_scale
        return (
            np.einsum("ij,ij->i", u, v)
            + self.user_bias[users]
            + self.item_bias[items]
            + self.global_bias[0]
        )

    def predict_many(self, users, items):
        return sigmoid(self.logits(users, items))

    def backprop(self, users, items, dlogit, dim_scale=None):
        """Parameter gradients for per-pair logit gradients ``dlogit``."""
        dlogit = np.asarray(dlogit, dtype=np.float64)
        u = self.user_embeddings[users]
        v = self.item_embeddings[items]
        if dim_scale is not None:
            u = u * dim_scale
        grads = {n: np.zeros_like(p) for n, p in self.params().items()}
        gu = dlogit[:, None] * v
        if dim_scale is not None:
            gu = gu * dim_scale
        np.add.at(grads["user_embeddings"], users, gu)
        np.add.at(grads["item_embeddings"], items, dlogit[:, None] * u)
        np.add.at(grads["user_bias"], users, dlogit)
        np.add.at(grads["item_bias"], items, dlogit)
        grads["global_bias"][0] = dlogit.sum()
        return grads


def predict(model: FactorModel, user: int, item: int) -> float:
    model.check_index([user], [item])
    return float(model.predict_many(np.array([user]), np.array([item]))[0])


def pointwise_error(label, prediction, kind=LossKind.BCE):
    """Per-pair error e >= 0. Labels may be soft (in [0, 1])."""
    r = np.asarray(label, dtype=np.float64)
    p = np.asarray(prediction, dtype=np.float64)
    if LossKind(kind) is LossKind.BCE:
        p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        return -r * np.log(p) - (1.0 - r) * np.log1p(-p)
    return (r - p) ** 2


def error_from_logit(label, logit, kind=LossKind.BCE):
    """Error, d error / d logit and d error / d label for prediction sigmoid(logit)."""
    r = np.asarray(label, dtype=np.float64)
    p = sigmoid(logit)
    if LossKind(kind) is LossKind.BCE:
        inside = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)
        pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        e = -r * np.log(pc) - (1.0 - r) * np.log1p(-pc)
        d_logit = np.where(inside, p - r, 0.0)
        d_label = np.log1p(-pc) - np.log(pc)
        return e, d_logit, d_label
    e = (r - p) ** 2
    return e, -2.0 * (r - p) * p * (1.0 - p), 2.0 * (r - p)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def like(cls, model: FactorModel):
        return cls({n: np.zeros_like(p) for n, p in model.params().items()},
                   {n: np.zeros_like(p) for n, p in model.params().items()})


class NonFiniteGradientError(FloatingPointError):
    pass


def adam_step(model, grads, state, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with decoupled weight decay, in place. Returns (model, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NonFiniteGradientError(f"{bad} non-finite entries in gradient of {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in model.params().items():
        g = grads[name]
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return model, state


def save_model(model: FactorModel, path) -> None:
    """npz checkpoint: ``format``/``version`` header entries plus one array per block."""
    with open(path, "wb") as fh:
        np.savez(fh, format=np.array(CHECKPOINT_FORMAT), version=np.array(CHECKPOINT_VERSION),
                 **model.params())


def load_model(path) -> FactorModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a factor-model checkpoint")
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(z['version'])}")
        return FactorModel(*(z[n] for n in PARAM_NAMES))


@dataclass
class PropensityTable:
    """Dense p_hat matrix, clipped to [floor, 1]."""

    values: np.ndarray
    floor: float = 0.05

    def __post_init__(self):
        if not self.floor > 0:
            raise ValueError("propensity floor must be positive")
        self.values = np.clip(np.asarray(self.values, dtype=np.float64), self.floor, 1.0)

    def lookup(self, users, items):
        return self.values[users, items]


def estimate_propensity_popularity(observations, exponent=0.5, floor=0.05) -> PropensityTable:
    """p_hat = max(floor, (n_u / max n_u * n_i / max n_i) ** exponent).

    Counts only records flagged observed.
    """
    if not floor > 0:
        raise ValueError("propensity floor must be positive")
    users = observations.users[observations.observed]
    items = observations.items[observations.observed]
    if len(users) == 0:
        raise ValueError("no observations to estimate propensities from")
    n_u = np.bincount(users, minlength=observations.num_users).astype(np.float64)
    n_i = np.bincount(items, minlength=observations.num_items).astype(np.float64)
    score = np.outer(n_u / n_u.max(), n_i / n_i.max()) ** exponent
    return PropensityTable(np.maximum(floor, score), floor)


def save_propensities(table: PropensityTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# floor={format(table.floor, '.17g')}\n")
        for u in range(table.values.shape[0]):
            for i in range(table.values.shape[1]):
                fh.write(f"{u}\t{i}\t{format(table.values[u, i], '.17g')}\n")


def load_propensities(path, num_users, num_items, floor=0.05) -> PropensityTable:
    """Read ``user item p`` lines; pairs not listed get ``floor``."""
    vals = np.full((num_users, num_items), floor)
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.size:
        vals[data[:, 0].astype(int), data[:, 1].astype(int)] = data[:, 2]
    return PropensityTable(vals, floor)
