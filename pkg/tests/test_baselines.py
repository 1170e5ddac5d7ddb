import numpy as np
import pytest

from bayeslfm.baselines import (
    FactorModel, SgdConfig, objective, point_gradient, point_loss, predict_map, train_pmf,
    train_svd, train_svd_bias,
)
from bayeslfm.errors import DivergenceError
from bayeslfm.evaluate import rmse
from bayeslfm.ingest import from_arrays


class TestPredictMap:
    def test_dot_product(self):
        model = FactorModel(P=np.array([[1.0, 2.0]]), Q=np.array([[3.0, 4.0]]))
        assert predict_map(model, 0, 0) == 11.0

    def test_bias_composition(self):
        model = FactorModel(P=np.zeros((1, 2)), Q=np.zeros((1, 2)), r_mean=3.58,
                            b_u=np.array([0.1]), b_i=np.array([-0.2]))
        assert predict_map(model, 0, 0) == pytest.approx(3.48, abs=1e-12)

    def test_clamp(self):
        model = FactorModel(P=np.array([[5.7]]), Q=np.array([[1.0]]))
        assert predict_map(model, 0, 0) == pytest.approx(5.7)
        assert predict_map(model, 0, 0, clamp=(1.0, 5.0)) == 5.0

    def test_out_of_bounds(self):
        model = FactorModel(P=np.zeros((2, 1)), Q=np.zeros((3, 1)))
        with pytest.raises(IndexError):
            predict_map(model, 2, 0)
        with pytest.raises(IndexError):
            predict_map(model, 0, np.array([0, 3]))

    def test_vectorised(self):
        model = FactorModel(P=np.array([[1.0], [2.0]]), Q=np.array([[3.0], [4.0]]))
        np.testing.assert_array_equal(predict_map(model, [0, 1], [1, 0]), [4.0, 6.0])


def test_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(learning_rate=0)
    with pytest.raises(ValueError):
        SgdConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SgdConfig(epochs=0)
    assert SgdConfig(K=16).scale == pytest.approx(0.1 / 4)


@pytest.mark.parametrize("with_bias", [False, True])
def test_point_gradient_finite_differences(with_bias):
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        p, q = rng.normal(size=4), rng.normal(size=4)
        r, lam = rng.uniform(1, 5), rng.uniform(0, 0.5)
        bias = dict(b_u=rng.normal(), b_i=rng.normal(), r_mean=3.0) if with_bias else {}
        analytic = point_gradient(p, q, r, lam, **bias)
        theta = np.concatenate([p, q] + ([[bias["b_u"], bias["b_i"]]] if with_bias else []))

        def f(t):
            kw = dict(b_u=t[8], b_i=t[9], r_mean=3.0) if with_bias else {}
            return point_loss(t[:4], t[4:8], r, lam, **kw)

        fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])
        got = np.concatenate([np.ravel(a) for a in analytic])
        np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-8)


def test_svd_single_interaction_fits_exactly():
    ds = from_arrays([0], [0], [2.0])
    model = train_svd(ds, SgdConfig(K=1, learning_rate=0.01, regularization=0.0, epochs=3000, seed=1))
    assert abs(predict_map(model, 0, 0) - 2.0) < 1e-2


def test_huge_regularisation_drives_factors_to_zero(toy):
    cfg = SgdConfig(K=2, learning_rate=1e-7, regularization=1e6, epochs=200, seed=0)
    model = train_svd(toy, cfg)
    assert np.abs(model.P).max() < 1e-6 and np.abs(model.Q).max() < 1e-6
    assert np.abs(model.predict(toy.users, toy.items)).max() < 1e-10


def test_sgd_loss_non_increasing(toy):
    model = train_svd(toy, SgdConfig(K=2, learning_rate=1e-3, regularization=0.01, epochs=100, seed=3))
    hist = np.array(model.loss_history)
    assert len(hist) == 100
    assert np.all(np.diff(hist) <= 0)


def test_svd_deterministic(small_random):
    cfg = SgdConfig(K=3, learning_rate=0.01, epochs=20, seed=5)
    a, b = train_svd(small_random, cfg), train_svd(small_random, cfg)
    assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)
    a, b = train_svd_bias(small_random, cfg), train_svd_bias(small_random, cfg)
    assert np.array_equal(a.b_u, b.b_u) and np.array_equal(a.P, b.P)
    c = train_svd(small_random, SgdConfig(K=3, learning_rate=0.01, epochs=20, seed=6))
    assert not np.array_equal(a.P, c.P)


def test_svd_divergence_reports_epoch(toy):
    with pytest.raises(DivergenceError) as err:
        train_svd(toy, SgdConfig(K=2, learning_rate=50.0, epochs=50, seed=0, init_scale=1.0))
    assert 1 <= err.value.iteration <= 50
    assert "learning_rate" in str(err.value)


def test_svd_bias_k0_is_bias_only(toy):
    model = train_svd_bias(toy, SgdConfig(K=0, learning_rate=0.01, epochs=5))
    assert model.K == 0 and model.has_bias
    expected = toy.r_mean + model.b_u[toy.users] + model.b_i[toy.items]
    np.testing.assert_array_equal(model.predict(toy.users, toy.items), expected)


def test_constant_ratings_keep_biases_zero():
    ds = from_arrays([0, 0, 1, 2], [0, 1, 1, 2], [3.0] * 4)
    model = train_svd_bias(ds, SgdConfig(K=0, learning_rate=0.01, regularization=0.1, epochs=50))
    np.testing.assert_allclose(model.b_u, 0.0, atol=1e-12)
    np.testing.assert_allclose(model.b_i, 0.0, atol=1e-12)


def _bias_only_reference(ds, lr, lam, epochs, seed):
    """Plain-Python bias-only SGD following the documented shuffle protocol."""
    rng = np.random.default_rng(seed)
    rng.uniform(size=(ds.m, 0))
    rng.uniform(size=(ds.n, 0))
    bu = [0.0] * ds.m
    bi = [0.0] * ds.n
    mean = sum(ds.ratings.tolist()) / len(ds)
    rows = list(zip(ds.users.tolist(), ds.items.tolist(), ds.ratings.tolist()))
    for _ in range(epochs):
        for idx in rng.permutation(len(rows)):
            u, i, r = rows[idx]
            e = r - (mean + bu[u] + bi[i])
            bu[u], bi[i] = bu[u] + lr * (2 * e - 2 * lam * bu[u]), bi[i] + lr * (2 * e - 2 * lam * bi[i])
    return np.array(bu), np.array(bi)


def test_bias_reduction_matches_reference():
    rng = np.random.default_rng(11)
    ds = from_arrays(rng.integers(0, 6, 40), rng.integers(0, 5, 40), rng.integers(1, 6, 40), m=6, n=5)
    model = train_svd_bias(ds, SgdConfig(K=0, learning_rate=0.02, regularization=0.05, epochs=60, seed=4))
    bu, bi = _bias_only_reference(ds, 0.02, 0.05, 60, 4)
    np.testing.assert_allclose(model.b_u, bu, atol=1e-6)
    np.testing.assert_allclose(model.b_i, bi, atol=1e-6)


def test_bias_model_recovers_additive_data():
    """λ = 0 on exactly additive ratings: SGD reaches the least-squares fit."""
    bu_true = np.array([0.5, -0.3, 0.1])
    bi_true = np.array([-0.4, 0.2, 0.0, 0.3])
    u, i = np.meshgrid(np.arange(3), np.arange(4), indexing="ij")
    u, i = u.ravel(), i.ravel()
    r = 3.0 + bu_true[u] + bi_true[i]
    ds = from_arrays(u, i, r)
    model = train_svd_bias(ds, SgdConfig(K=0, learning_rate=0.02, regularization=0.0, epochs=2000))
    np.testing.assert_allclose(model.predict(u, i), r, atol=1e-6)


def _manual_full_batch(ds, P, Q, lr, lam, epochs):
    P, Q = P.copy(), Q.copy()
    cu = np.maximum(np.bincount(ds.users, minlength=ds.m), 1)[:, None]
    ci = np.maximum(np.bincount(ds.items, minlength=ds.n), 1)[:, None]
    for _ in range(epochs):
        gP, gQ = np.zeros_like(P), np.zeros_like(Q)
        for u, i, r in zip(ds.users, ds.items, ds.ratings):
            e = r - P[u] @ Q[i]
            gP[u] += -2 * e * Q[i]
            gQ[i] += -2 * e * P[u]
        P, Q = P - lr * (gP / cu + 2 * lam * P), Q - lr * (gQ / ci + 2 * lam * Q)
    return P, Q


def test_pmf_without_momentum_is_plain_full_batch_descent(small_random):
    cfg = SgdConfig(K=3, learning_rate=0.05, regularization=0.01, momentum=0.0, epochs=25, seed=2)
    model = train_pmf(small_random, cfg)
    rng = np.random.default_rng(2)
    s = cfg.scale
    P0, Q0 = rng.uniform(-s, s, (5, 3)), rng.uniform(-s, s, (5, 3))
    P, Q = _manual_full_batch(small_random, P0, Q0, 0.05, 0.01, 25)
    np.testing.assert_allclose(model.P, P, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(model.Q, Q, rtol=1e-10, atol=1e-12)


def test_pmf_recovers_rank2_noiseless():
    rng = np.random.default_rng(0)
    m, n = 30, 25
    P, Q = rng.normal(size=(m, 2)), rng.normal(size=(n, 2))
    mask = rng.random((m, n)) < 0.6
    u, i = np.nonzero(mask)
    ds = from_arrays(u, i, np.einsum("nk,nk->n", P[u], Q[i]), m=m, n=n)
    model = train_pmf(ds, SgdConfig(K=2, learning_rate=0.05, regularization=0.0, momentum=0.9,
                                    epochs=1500, seed=1, init_scale=0.5))
    assert rmse(model.predict, ds) < 0.05


def test_objective_per_occurrence_matches_pointwise(toy):
    model = train_svd_bias(toy, SgdConfig(K=2, learning_rate=0.01, epochs=3))
    total = sum(
        point_loss(model.P[u], model.Q[i], r, 0.1, model.b_u[u], model.b_i[i], model.r_mean)
        for u, i, r, _ in toy.interactions
    )
    assert objective(model, toy, 0.1) == pytest.approx(total, rel=1e-12)
