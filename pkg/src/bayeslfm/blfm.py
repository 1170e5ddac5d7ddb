"""Bayesian latent factor models fitted by mean-field variational inference.

Every latent scalar (each factor entry ``p_uk``, ``q_ik`` and, for the bias
model, each ``b_u``, ``b_i``) gets an independent Gaussian ``N(mean, exp(logstd)^2)``.
With a Gaussian likelihood the expected log-likelihood has a closed form, so
the ELBO and its gradient are computed exactly and optimised by full-batch
gradient ascent. Predictions are posterior expectations of the rating mean,
either analytic or Monte-Carlo.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .errors import DivergenceError, ShapeMismatchError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior and likelihood hyperparameters (all second parameters are variances).

    ``factor_mean`` and ``factor_var`` may be scalars or length-K vectors to
    give each latent dimension its own prior.
    """

    factor_mean: float | tuple = 0.0
    factor_var: float | tuple = 1.0
    bias_var: float = 1.0
    noise_var: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.factor_var) <= 0):
            raise ValueError("factor_var must be > 0")
        if not self.bias_var > 0:
            raise ValueError("bias_var must be > 0")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")

    @classmethod
    def from_mean_rating(cls, r_mean):
        """Zero-mean priors whose variances, and the noise variance, equal ``r_mean``."""
        return cls(factor_mean=0.0, factor_var=r_mean, bias_var=r_mean, noise_var=r_mean)

    def factor_arrays(self, K):
        mean = np.broadcast_to(np.asarray(self.factor_mean, dtype=float), (K,))
        var = np.broadcast_to(np.asarray(self.factor_var, dtype=float), (K,))
        return mean, var

    def as_dict(self):
        d = asdict(self)
        for key in ("factor_mean", "factor_var"):
            if isinstance(d[key], (tuple, list, np.ndarray)):
                d[key] = [float(x) for x in d[key]]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("factor_mean", "factor_var"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ViConfig:
    K: int = 8
    iterations: int = 10000
    step_size: float = 0.01
    mc_samples: int = 2000
    seed: int = 0
    with_bias: bool = False
    eval_every: int = 100

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be non-negative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def as_dict(self):
        return asdict(self)


_PARAM_NAMES = ("P_mean", "P_logstd", "Q_mean", "Q_logstd",
                "Bu_mean", "Bu_logstd", "Bi_mean", "Bi_logstd")


@dataclass
class VariationalPosterior:
    P_mean: np.ndarray
    P_logstd: np.ndarray
    Q_mean: np.ndarray
    Q_logstd: np.ndarray
    prior: PriorSpec
    r_mean: float = 0.0
    Bu_mean: np.ndarray | None = None
    Bu_logstd: np.ndarray | None = None
    Bi_mean: np.ndarray | None = None
    Bi_logstd: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        present = [getattr(self, f) is not None for f in _PARAM_NAMES[4:]]
        if any(present) and not all(present):
            raise ValueError("bias arrays must be all present or all absent")
        if self.P_mean.shape != self.P_logstd.shape or self.Q_mean.shape != self.Q_logstd.shape:
            raise ShapeMismatchError("mean/logstd shape mismatch")
        if self.P_mean.shape[1] != self.Q_mean.shape[1]:
            raise ShapeMismatchError("P and Q disagree on K")

    @property
    def K(self):
        return self.P_mean.shape[1]

    @property
    def m(self):
        return self.P_mean.shape[0]

    @property
    def n(self):
        return self.Q_mean.shape[0]

    @property
    def has_bias(self):
        return self.Bu_mean is not None

    def param_names(self):
        return _PARAM_NAMES if self.has_bias else _PARAM_NAMES[:4]

    def params(self):
        return {name: getattr(self, name) for name in self.param_names()}

    def to_vector(self):
        return np.concatenate([getattr(self, name).ravel() for name in self.param_names()])

    def with_vector(self, vec):
        """Return a copy whose parameters are read from the flat vector ``vec``."""
        out = {}
        offset = 0
        for name in self.param_names():
            shape = getattr(self, name).shape
            size = int(np.prod(shape))
            out[name] = np.array(vec[offset:offset + size]).reshape(shape)
            offset += size
        if offset != len(vec):
            raise ValueError("vector length does not match posterior")
        return VariationalPosterior(prior=self.prior, r_mean=self.r_mean, meta=dict(self.meta), **out)

    def copy(self):
        return self.with_vector(self.to_vector())

    def predict(self, users, items, mode="analytic", n_samples=2000, seed=0, clamp=None):
        return predict_expected(self, users, items, mode=mode, n_samples=n_samples,
                                seed=seed, clamp=clamp)


@dataclass
class ElboGradient:
    """Partial derivatives of the ELBO, one array per posterior parameter."""

    P_mean: np.ndarray
    P_logstd: np.ndarray
    Q_mean: np.ndarray
    Q_logstd: np.ndarray
    Bu_mean: np.ndarray | None = None
    Bu_logstd: np.ndarray | None = None
    Bi_mean: np.ndarray | None = None
    Bi_logstd: np.ndarray | None = None

    def to_vector(self):
        return np.concatenate([getattr(self, f.name).ravel() for f in fields(self)
                               if getattr(self, f.name) is not None])


def init_posterior(m, n, cfg, prior, ds_mean):
    """Seeded initial posterior: means ~ U(-0.05, 0.05), std = 0.1 * prior std."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    K = cfg.K
    _, fvar = prior.factor_arrays(K)
    factor_logstd = np.log(0.1 * np.sqrt(fvar))
    post = dict(
        P_mean=rng.uniform(-0.05, 0.05, size=(m, K)),
        P_logstd=np.tile(factor_logstd, (m, 1)),
        Q_mean=rng.uniform(-0.05, 0.05, size=(n, K)),
        Q_logstd=np.tile(factor_logstd, (n, 1)),
    )
    if cfg.with_bias:
        bias_logstd = math.log(0.1 * math.sqrt(prior.bias_var))
        post.update(
            Bu_mean=rng.uniform(-0.05, 0.05, size=m),
            Bu_logstd=np.full(m, bias_logstd),
            Bi_mean=rng.uniform(-0.05, 0.05, size=n),
            Bi_logstd=np.full(n, bias_logstd),
        )
    return VariationalPosterior(prior=prior, r_mean=float(ds_mean), **post)


def kl_gaussian(q_mean, q_var, p_mean, p_var):
    """KL(N(q_mean, q_var) || N(p_mean, p_var)); broadcasts over arrays."""
    q_var = np.asarray(q_var, dtype=float)
    p_var = np.asarray(p_var, dtype=float)
    if np.any(q_var <= 0) or np.any(p_var <= 0):
        raise ValueError("variances must be positive")
    ratio = q_var / p_var
    diff = np.asarray(q_mean, dtype=float) - p_mean
    kl = 0.5 * (ratio + diff * diff / p_var - 1.0 - np.log(ratio))
    # cancellation can leave tiny negatives when q == p
    kl = np.maximum(kl, 0.0)
    return float(kl) if kl.ndim == 0 else kl


def _check_index(post, u, i):
    u = np.asarray(u, dtype=np.int64)
    i = np.asarray(i, dtype=np.int64)
    if u.size and (u.min() < 0 or u.max() >= post.m):
        raise IndexError(f"user index out of bounds for m={post.m}")
    if i.size and (i.min() < 0 or i.max() >= post.n):
        raise IndexError(f"item index out of bounds for n={post.n}")
    return u, i


def _mean_and_variance(post, u, i):
    """Mean and variance of the rating mean ``s_ui`` under the posterior, vectorised."""
    mp, mq = post.P_mean[u], post.Q_mean[i]
    vp = np.exp(2.0 * post.P_logstd[u])
    vq = np.exp(2.0 * post.Q_logstd[i])
    mean = np.einsum("...k,...k->...", mp, mq)
    var = np.einsum("...k,...k->...", vp, mq * mq + vq) + np.einsum("...k,...k->...", mp * mp, vq)
    if post.has_bias:
        mean = mean + post.r_mean + post.Bu_mean[u] + post.Bi_mean[i]
        var = var + np.exp(2.0 * post.Bu_logstd[u]) + np.exp(2.0 * post.Bi_logstd[i])
    return mean, var


def expected_sq_err(post, u, i, r):
    """E_q[(r - s_ui)^2] = (r - E[s_ui])^2 + Var[s_ui] under the factorised posterior."""
    u, i = _check_index(post, u, i)
    mean, var = _mean_and_variance(post, u, i)
    out = (np.asarray(r, dtype=float) - mean) ** 2 + var
    return float(out) if np.ndim(out) == 0 else out


class _Design:
    """Sparse scatter matrices mapping per-interaction values onto users/items."""

    def __init__(self, train, m, n):
        N = len(train)
        if N and (train.users.max() >= m or train.items.max() >= n):
            raise ShapeMismatchError(
                f"dataset indices exceed posterior dimensions (m={m}, n={n})")
        if train.m != m or train.n != n:
            raise ShapeMismatchError(
                f"posterior is {m}x{n} but dataset index is {train.m}x{train.n}")
        cols = np.arange(N)
        ones = np.ones(N)
        self.users = train.users
        self.items = train.items
        self.ratings = train.ratings
        self.to_users = sp.csr_matrix((ones, (train.users, cols)), shape=(m, N))
        self.to_items = sp.csr_matrix((ones, (train.items, cols)), shape=(n, N))
        self.user_counts = np.bincount(train.users, minlength=m).astype(float)
        self.item_counts = np.bincount(train.items, minlength=n).astype(float)
        self.N = N


def _kl_and_grad(mean, logstd, p_mean, p_var):
    """Summed KL of a block of scalars, with gradients w.r.t. mean and logstd."""
    var = np.exp(2.0 * logstd)
    diff = mean - p_mean
    kl = 0.5 * (var / p_var + diff * diff / p_var - 1.0 - 2.0 * logstd + np.log(p_var))
    return float(np.sum(kl)), diff / p_var, var / p_var - 1.0


def _elbo_terms(post, design, need_grad=True):
    prior = post.prior
    K = post.K
    noise_prec = 1.0 / prior.noise_var
    u, i, r = design.users, design.items, design.ratings

    mp, mq = post.P_mean[u], post.Q_mean[i]
    vP = np.exp(2.0 * post.P_logstd)
    vQ = np.exp(2.0 * post.Q_logstd)
    vp, vq = vP[u], vQ[i]
    s_mean = np.einsum("nk,nk->n", mp, mq)
    s_var = np.einsum("nk,nk->n", vp, mq * mq + vq) + np.einsum("nk,nk->n", mp * mp, vq)
    if post.has_bias:
        vBu = np.exp(2.0 * post.Bu_logstd)
        vBi = np.exp(2.0 * post.Bi_logstd)
        s_mean = s_mean + post.r_mean + post.Bu_mean[u] + post.Bi_mean[i]
        s_var = s_var + vBu[u] + vBi[i]
    e = r - s_mean
    loglik = -0.5 * design.N * (LOG_2PI + math.log(prior.noise_var)) \
        - 0.5 * noise_prec * (float(e @ e) + float(np.sum(s_var)))

    f_mean, f_var = prior.factor_arrays(K)
    kl_p, gkl_pm, gkl_ps = _kl_and_grad(post.P_mean, post.P_logstd, f_mean, f_var)
    kl_q, gkl_qm, gkl_qs = _kl_and_grad(post.Q_mean, post.Q_logstd, f_mean, f_var)
    kl = kl_p + kl_q
    if post.has_bias:
        kl_bu, gkl_bum, gkl_bus = _kl_and_grad(post.Bu_mean, post.Bu_logstd, 0.0, prior.bias_var)
        kl_bi, gkl_bim, gkl_bis = _kl_and_grad(post.Bi_mean, post.Bi_logstd, 0.0, prior.bias_var)
        kl += kl_bu + kl_bi
    value = loglik - kl
    if not need_grad:
        return value, None

    # d/d mean_p_uk  = c * sum_i [e * mq - mp * vq]
    # d/d logstd_p_uk = -c * vp * sum_i [mq^2 + vq]
    g = ElboGradient(
        P_mean=noise_prec * (design.to_users @ (e[:, None] * mq)
                             - post.P_mean * (design.to_users @ vq)) - gkl_pm,
        P_logstd=-noise_prec * vP * (design.to_users @ (mq * mq + vq)) - gkl_ps,
        Q_mean=noise_prec * (design.to_items @ (e[:, None] * mp)
                             - post.Q_mean * (design.to_items @ vp)) - gkl_qm,
        Q_logstd=-noise_prec * vQ * (design.to_items @ (mp * mp + vp)) - gkl_qs,
    )
    if post.has_bias:
        g.Bu_mean = noise_prec * (design.to_users @ e) - gkl_bum
        g.Bu_logstd = -noise_prec * vBu * design.user_counts - gkl_bus
        g.Bi_mean = noise_prec * (design.to_items @ e) - gkl_bim
        g.Bi_logstd = -noise_prec * vBi * design.item_counts - gkl_bis
    return value, g


def elbo(post, train):
    """Exact ELBO: expected log-likelihood minus KL to the prior, summed over all scalars."""
    return _elbo_terms(post, _Design(train, post.m, post.n), need_grad=False)[0]


def elbo_gradient(post, train):
    """Analytic gradient of :func:`elbo` w.r.t. every variational mean and log-std."""
    return _elbo_terms(post, _Design(train, post.m, post.n))[1]


@dataclass
class FitResult:
    posterior: VariationalPosterior
    trace: list  # (iteration, elbo) pairs
    final_step_size: float
    converged_at: int | None = None


def fit_vi(train, cfg, prior, init=None, max_halvings=60):
    """Maximise the ELBO by full-batch gradient ascent.

    A step is accepted only if the ELBO does not decrease; otherwise the step
    size is halved (permanently) and the step retried. If no halving yields a
    finite improvement the optimum has been reached to working precision and
    the loop stops early. The ELBO is recorded at iteration 0, every
    ``cfg.eval_every`` iterations, and at the last iteration performed.
    """
    if init is None:
        init = init_posterior(train.m, train.n, cfg, prior, train.r_mean if len(train) else 0.0)
    design = _Design(train, init.m, init.n)
    post = init
    theta = post.to_vector()

    value, grad = _elbo_terms(post, design)
    if not math.isfinite(value):
        raise DivergenceError("initial ELBO is not finite", 0, "check the prior and initialisation")
    g = grad.to_vector()
    step = cfg.step_size
    trace = [(0, value)]
    converged_at = None

    for it in range(1, cfg.iterations + 1):
        for _ in range(max_halvings):
            cand = post.with_vector(theta + step * g)
            with np.errstate(over="ignore", invalid="ignore"):
                c_value, c_grad = _elbo_terms(cand, design)
            if math.isfinite(c_value) and c_value >= value:
                break
            step *= 0.5
        else:
            if not math.isfinite(c_value):
                raise DivergenceError("ELBO became non-finite", it,
                                      f"reduce step_size below {cfg.step_size:g}")
            converged_at = it - 1
            logger.info("ELBO stationary to working precision at iteration %d", converged_at)
            break
        post, value = cand, c_value
        theta = post.to_vector()
        g = c_grad.to_vector()
        if not np.all(np.isfinite(g)):
            raise DivergenceError("gradient became non-finite", it,
                                  f"reduce step_size below {cfg.step_size:g}")
        if it % cfg.eval_every == 0:
            trace.append((it, value))
            logger.debug("iteration %d elbo %.6f step %.3g", it, value, step)

    last = converged_at if converged_at is not None else cfg.iterations
    if trace[-1][0] != last:
        trace.append((last, value))
    post.meta = {"model": "blfmbias" if cfg.with_bias else "blfm", "config": cfg.as_dict()}
    return FitResult(posterior=post, trace=trace, final_step_size=step, converged_at=converged_at)


def _sample_ratings(post, u, i, n_samples, rng):
    """Draw ``(n_samples, len(u))`` rating means with every scalar sampled independently."""
    K = post.K
    N = len(u)
    sp_ = np.exp(post.P_logstd[u])
    sq_ = np.exp(post.Q_logstd[i])
    mp, mq = post.P_mean[u], post.Q_mean[i]
    if post.has_bias:
        sbu = np.exp(post.Bu_logstd[u])
        sbi = np.exp(post.Bi_logstd[i])
    chunk = max(1, int(2_000_000 // max(1, N * max(K, 1))))
    out = np.empty((n_samples, N))
    for start in range(0, n_samples, chunk):
        c = min(chunk, n_samples - start)
        p = mp + sp_ * rng.standard_normal((c, N, K))
        q = mq + sq_ * rng.standard_normal((c, N, K))
        s = np.einsum("cnk,cnk->cn", p, q)
        if post.has_bias:
            bu = post.Bu_mean[u] + sbu * rng.standard_normal((c, N))
            bi = post.Bi_mean[i] + sbi * rng.standard_normal((c, N))
            s += post.r_mean + bu + bi
        out[start:start + c] = s
    return out


def sample_posterior(post, u, i, n_samples, seed):
    """Sampled rating means for one (user, item) pair."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    u, i = _check_index(post, u, i)
    rng = np.random.default_rng(seed)
    return _sample_ratings(post, np.atleast_1d(u), np.atleast_1d(i), n_samples, rng)[:, 0]


def predict_expected(post, u, i, mode="analytic", n_samples=2000, seed=0, clamp=None):
    """Posterior expectation of the rating mean.

    ``mode="analytic"`` returns ``sum_k mp*mq`` (+ ``r_mean + mu_bu + mu_bi``),
    which is exact under the factorised posterior. ``mode="monte-carlo"``
    averages ``n_samples`` draws (seeded).
    """
    scalar = np.ndim(u) == 0 and np.ndim(i) == 0
    users, items = _check_index(post, np.atleast_1d(u), np.atleast_1d(i))
    if mode == "analytic":
        pred = _mean_and_variance(post, users, items)[0]
    elif mode in ("monte-carlo", "mc"):
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        rng = np.random.default_rng(seed)
        pred = _sample_ratings(post, users, items, n_samples, rng).mean(axis=0)
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    if clamp is not None:
        pred = np.clip(pred, clamp[0], clamp[1])
    return float(pred[0]) if scalar else pred
