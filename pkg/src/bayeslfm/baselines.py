"""MAP-style latent factor baselines: SVD, SVDBias (per-interaction SGD) and PMF
(full-batch gradient descent with classical momentum).

All trainers minimise the regularised squared error

    sum_{(u,i,r)} (r - pred_ui)^2 + lam * (|p_u|^2 + |q_i|^2 [+ b_u^2 + b_i^2])

where ``pred_ui = p_u . q_i`` (plus ``r_mean + b_u + b_i`` for the bias
model). SGD applies the penalty each time a row is touched; PMF applies it
once per epoch to every row.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .errors import DivergenceError, ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class FactorModel:
    P: np.ndarray
    Q: np.ndarray
    r_mean: float = 0.0
    b_u: np.ndarray | None = None
    b_i: np.ndarray | None = None
    loss_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.b_u is None) != (self.b_i is None):
            raise ValueError("b_u and b_i must both be present or both absent")
        if self.P.shape[1] != self.Q.shape[1]:
            raise ShapeMismatchError(f"P has K={self.P.shape[1]} but Q has K={self.Q.shape[1]}")

    @property
    def K(self):
        return self.P.shape[1]

    @property
    def m(self):
        return self.P.shape[0]

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def has_bias(self):
        return self.b_u is not None

    def predict(self, users, items, clamp=None):
        return predict_map(self, users, items, clamp=clamp)


@dataclass(frozen=True)
class SgdConfig:
    K: int = 32
    learning_rate: float = 0.001
    regularization: float = 0.01
    momentum: float = 0.0
    epochs: int = 30
    seed: int = 0
    init_scale: float | None = None

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def scale(self):
        if self.init_scale is not None:
            return self.init_scale
        return 0.1 / math.sqrt(self.K) if self.K > 0 else 0.0

    def as_dict(self):
        return asdict(self)


SVD_DEFAULTS = dict(learning_rate=0.001, regularization=0.01, momentum=0.0, epochs=30)
PMF_DEFAULTS = dict(learning_rate=0.005, regularization=0.01, momentum=0.9, epochs=200)


def _init_factors(rng, m, n, cfg):
    s = cfg.scale
    P = rng.uniform(-s, s, size=(m, cfg.K))
    Q = rng.uniform(-s, s, size=(n, cfg.K))
    return P, Q


def _check_bounds(train, m, n):
    if len(train) == 0:
        return
    if train.users.max() >= m or train.items.max() >= n:
        raise ShapeMismatchError("interaction index outside model dimensions")


def point_gradient(p, q, r, lam, b_u=None, b_i=None, r_mean=0.0):
    """Exact gradient of ``(r - pred)^2 + lam*(|p|^2 + |q|^2 [+ b_u^2 + b_i^2])``.

    Returns ``(dp, dq)`` or ``(dp, dq, db_u, db_i)`` when biases are given.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pred = p @ q
    if b_u is not None:
        pred += r_mean + b_u + b_i
    e = r - pred
    dp = -2.0 * e * q + 2.0 * lam * p
    dq = -2.0 * e * p + 2.0 * lam * q
    if b_u is None:
        return dp, dq
    return dp, dq, -2.0 * e + 2.0 * lam * b_u, -2.0 * e + 2.0 * lam * b_i


def point_loss(p, q, r, lam, b_u=None, b_i=None, r_mean=0.0):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pred = p @ q
    reg = p @ p + q @ q
    if b_u is not None:
        pred += r_mean + b_u + b_i
        reg += b_u * b_u + b_i * b_i
    return (r - pred) ** 2 + lam * reg


def objective(model, data, lam, per_occurrence=True):
    """Regularised squared error of ``model`` on ``data``.

    With ``per_occurrence`` the penalty on a row is counted once per
    interaction it takes part in (the quantity SGD descends); otherwise once
    per row (the full-batch PMF objective).
    """
    # a diverging run overflows here; callers detect the non-finite value
    with np.errstate(over="ignore", invalid="ignore"):
        err = data.ratings - _raw_predict(model, data.users, data.items)
        sse = float(err @ err)
        if per_occurrence:
            pu = np.einsum("ij,ij->i", model.P, model.P)
            qi = np.einsum("ij,ij->i", model.Q, model.Q)
            reg = pu @ data.user_counts() if len(data) else 0.0
            reg += qi @ data.item_counts() if len(data) else 0.0
            if model.has_bias:
                reg += (model.b_u**2) @ data.user_counts() + (model.b_i**2) @ data.item_counts()
        else:
            reg = float(np.sum(model.P**2) + np.sum(model.Q**2))
            if model.has_bias:
                reg += float(model.b_u @ model.b_u + model.b_i @ model.b_i)
        return sse + lam * float(reg)


@njit(cache=True)
def _sgd_epoch(users, items, ratings, order, P, Q, b_u, b_i, r_mean, lr, lam, use_bias):
    K = P.shape[1]
    for idx in order:
        u = users[idx]
        i = items[idx]
        pred = 0.0
        for k in range(K):
            pred += P[u, k] * Q[i, k]
        if use_bias:
            pred += r_mean + b_u[u] + b_i[i]
        e = ratings[idx] - pred
        for k in range(K):
            pu = P[u, k]
            qi = Q[i, k]
            P[u, k] = pu - lr * (-2.0 * e * qi + 2.0 * lam * pu)
            Q[i, k] = qi - lr * (-2.0 * e * pu + 2.0 * lam * qi)
        if use_bias:
            bu = b_u[u]
            bi = b_i[i]
            b_u[u] = bu - lr * (-2.0 * e + 2.0 * lam * bu)
            b_i[i] = bi - lr * (-2.0 * e + 2.0 * lam * bi)


def _all_finite(model):
    ok = np.isfinite(model.P).all() and np.isfinite(model.Q).all()
    if model.has_bias:
        ok = ok and np.isfinite(model.b_u).all() and np.isfinite(model.b_i).all()
    return bool(ok)


def _train_sgd(train, cfg, with_bias):
    m, n = train.m, train.n
    rng = np.random.default_rng(cfg.seed)
    P, Q = _init_factors(rng, m, n, cfg)
    r_mean = train.r_mean if with_bias else 0.0
    b_u = np.zeros(m) if with_bias else None
    b_i = np.zeros(n) if with_bias else None
    model = FactorModel(P=P, Q=Q, r_mean=r_mean, b_u=b_u, b_i=b_i)

    users, items, ratings = train.users, train.items, train.ratings
    # numba wants concrete arrays even on the no-bias path
    bu_arr = b_u if with_bias else np.zeros(1)
    bi_arr = b_i if with_bias else np.zeros(1)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        _sgd_epoch(users, items, ratings, order, P, Q, bu_arr, bi_arr,
                   float(r_mean), cfg.learning_rate, cfg.regularization, with_bias)
        loss = objective(model, train, cfg.regularization, per_occurrence=True)
        if not (_all_finite(model) and math.isfinite(loss)):
            raise DivergenceError("SGD produced non-finite parameters", epoch,
                                  "reduce learning_rate")
        model.loss_history.append(loss)
        logger.debug("epoch %d loss %.6f", epoch, loss)
    model.meta = {"model": "svdbias" if with_bias else "svd", "config": cfg.as_dict()}
    return model


def train_svd(train, cfg):
    """Per-interaction SGD on the regularised squared error, no biases."""
    if cfg.momentum != 0:
        raise ValueError("plain SVD uses momentum = 0")
    return _train_sgd(train, cfg, with_bias=False)


def train_svd_bias(train, cfg):
    """SGD with prediction ``r_mean + b_u + b_i + p_u . q_i``; ``K = 0`` is allowed."""
    if cfg.momentum != 0:
        raise ValueError("SVDBias uses momentum = 0")
    return _train_sgd(train, cfg, with_bias=True)


def full_batch_gradient(P, Q, train, lam):
    """Gradient of the full-batch objective, averaged over each row's interactions.

    The data term of row ``u`` is divided by its interaction count (rows with
    no interactions keep only the penalty). This diagonal scaling keeps a
    single learning rate stable for rows with very different counts.
    """
    u, i, r = train.users, train.items, train.ratings
    e = r - np.einsum("ij,ij->i", P[u], Q[i])
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    for k in range(P.shape[1]):
        gP[:, k] = np.bincount(u, weights=-2.0 * e * Q[i, k], minlength=P.shape[0])
        gQ[:, k] = np.bincount(i, weights=-2.0 * e * P[u, k], minlength=Q.shape[0])
    gP /= np.maximum(train.user_counts(), 1)[:, None]
    gQ /= np.maximum(train.item_counts(), 1)[:, None]
    gP += 2.0 * lam * P
    gQ += 2.0 * lam * Q
    return gP, gQ


def train_pmf(train, cfg):
    """Full-batch gradient descent with classical momentum.

    ``v <- momentum * v - lr * grad``; ``theta <- theta + v``.
    """
    rng = np.random.default_rng(cfg.seed)
    P, Q = _init_factors(rng, train.m, train.n, cfg)
    vP = np.zeros_like(P)
    vQ = np.zeros_like(Q)
    model = FactorModel(P=P, Q=Q)
    for epoch in range(1, cfg.epochs + 1):
        gP, gQ = full_batch_gradient(P, Q, train, cfg.regularization)
        vP *= cfg.momentum
        vP -= cfg.learning_rate * gP
        vQ *= cfg.momentum
        vQ -= cfg.learning_rate * gQ
        P += vP
        Q += vQ
        loss = objective(model, train, cfg.regularization, per_occurrence=False)
        if not (_all_finite(model) and math.isfinite(loss)):
            raise DivergenceError("PMF produced non-finite parameters", epoch,
                                  "reduce learning_rate")
        model.loss_history.append(loss)
    model.meta = {"model": "pmf", "config": cfg.as_dict()}
    return model


def _raw_predict(model, users, items):
    pred = np.einsum("ij,ij->i", model.P[users], model.Q[items])
    if model.has_bias:
        pred += model.r_mean + model.b_u[users] + model.b_i[items]
    return pred


def predict_map(model, u, i, clamp=None):
    """Point prediction ``p_u . q_i`` (+ ``r_mean + b_u + b_i`` with biases).

    ``u`` and ``i`` may be scalars or equal-length arrays. ``clamp`` is an
    optional ``(r_min, r_max)`` pair.
    """
    scalar = np.ndim(u) == 0 and np.ndim(i) == 0
    users = np.atleast_1d(np.asarray(u, dtype=np.int64))
    items = np.atleast_1d(np.asarray(i, dtype=np.int64))
    if users.size and (users.min() < 0 or users.max() >= model.m):
        raise IndexError(f"user index out of bounds for m={model.m}")
    if items.size and (items.min() < 0 or items.max() >= model.n):
        raise IndexError(f"item index out of bounds for n={model.n}")
    pred = _raw_predict(model, users, items)
    if clamp is not None:
        pred = np.clip(pred, clamp[0], clamp[1])
    return float(pred[0]) if scalar else pred
