"""Estimator behavior: recovery oracles, the sign rule, sklearn compliance."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from envmix.estimators import (
    EnvPenaltyClassifier,
    EnvPenaltyRegressor,
    FitDivergenceError,
    RandomInterceptClassifier,
    RandomInterceptRegressor,
    load_estimator,
)
from envmix.families import inverse_softplus
from envmix.nnet import init_mlp
from envmix.quadrature import GaussHermite, bernoulli_marginal_prob, env_marginal_loglik
from envmix.families import Gaussian
from envmix.quadrature import GaussianClosedForm
from envmix.rng import stream


def linear_intercept_data(seed, n_envs=200, n_per_env=50, sigma=0.8, noise=0.5,
                          beta=1.0):
    """Exactly-specified linear random-intercept generator (x independent of e)."""
    Xs, ys, envs = [], [], []
    for j in range(n_envs):
        rng = stream(seed, "linear-ri", j)
        gamma = sigma * rng.standard_normal()
        x = rng.standard_normal((n_per_env, 1))
        y = beta * x[:, 0] + gamma + noise * rng.standard_normal(n_per_env)
        Xs.append(x)
        ys.append(y)
        envs.append(np.full(n_per_env, j))
    return np.vstack(Xs), np.concatenate(ys), np.concatenate(envs)


def binary_intercept_data(seed, n_envs=60, n_per_env=80, sigma=1.0, weights=(1.5, -1.0)):
    """Logistic random-intercept generator on 2-d inputs."""
    w = np.asarray(weights)
    Xs, ys, envs = [], [], []
    for j in range(n_envs):
        rng = stream(seed, "binary-ri", j)
        gamma = sigma * rng.standard_normal()
        x = rng.standard_normal((n_per_env, 2))
        p = 1.0 / (1.0 + np.exp(-(x @ w + gamma)))
        y = (rng.random(n_per_env) < p).astype(float)
        Xs.append(x)
        ys.append(y)
        envs.append(np.full(n_per_env, j))
    return np.vstack(Xs), np.concatenate(ys), np.concatenate(envs)


class TestParameterRecovery:
    def test_gaussian_linear_recovery(self):
        """Exactly-specified data: head within 5% of 1, sigma within 0.1 of 0.8."""
        X, y, envs = linear_intercept_data(seed=0)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(), rule="closed-form", learning_rate=0.02,
            epochs=40, env_batch_size=16, random_state=1,
        ).fit(X, y, envs)
        assert abs(est.params_.get("head")[0] - 1.0) < 0.05
        assert 0.7 <= est.sigma_ <= 0.9
        assert abs(est.noise_scale_ - 0.5) < 0.1

    def test_degenerate_generator_shrinks_sigma(self):
        """No environment effect in the data drives the fitted sigma below 0.05."""
        X, y, envs = linear_intercept_data(seed=3, n_envs=120, n_per_env=40, sigma=0.0)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(), rule="closed-form", learning_rate=0.02,
            epochs=40, env_batch_size=16, random_state=2,
        ).fit(X, y, envs)
        assert est.sigma_ < 0.05

    def test_sigma_tracks_generator_variance(self):
        """Fitted sigma increases with the generator's intercept scale (rank test)."""
        means = []
        for sigma_true in (0.0, 1.0, 2.0):
            fits = []
            for seed in range(5):
                X, y, envs = linear_intercept_data(
                    seed=10 + seed, n_envs=60, n_per_env=30, sigma=sigma_true
                )
                est = RandomInterceptRegressor(
                    hidden_layer_sizes=(), rule="closed-form", learning_rate=0.03,
                    epochs=25, env_batch_size=16, random_state=seed,
                ).fit(X, y, envs)
                fits.append(est.sigma_)
            means.append(np.mean(fits))
        assert means[0] < means[1] < means[2]

    def test_quadrature_fit_binary(self):
        """Bernoulli fitting by quadrature recovers the intercept scale roughly."""
        X, y, envs = binary_intercept_data(seed=5)
        est = RandomInterceptClassifier(
            hidden_layer_sizes=(), rule="gauss-hermite", quad_order=24,
            learning_rate=0.05, epochs=60, env_batch_size=20, random_state=3,
        ).fit(X, y, envs)
        w = est.params_.get("head")
        # direction recovered: ratio of weights close to 1.5 / -1.0
        assert w[0] / w[1] == pytest.approx(-1.5, abs=0.35)
        assert 0.5 <= est.sigma_ <= 1.6


class TestFitMechanics:
    def test_zero_learning_rate_keeps_initialization(self):
        X, y, envs = linear_intercept_data(seed=1, n_envs=4, n_per_env=10)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(8,), learning_rate=0.0, epochs=1, random_state=9
        ).fit(X, y, envs)
        init = init_mlp(9, 1, (8,))
        for name, arr in init.items():
            np.testing.assert_array_equal(est.params_.get(name), arr)
        assert est.params_.get("sigma_raw") == pytest.approx(inverse_softplus(0.5))

    def test_likelihood_ascends(self):
        X, y, envs = linear_intercept_data(seed=2, n_envs=30, n_per_env=20)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(16,), learning_rate=0.02, epochs=15, random_state=4
        ).fit(X, y, envs)
        assert est.loss_trace_[-1] < est.loss_trace_[0]

    def test_fit_determinism(self):
        X, y, envs = linear_intercept_data(seed=6, n_envs=10, n_per_env=12)
        kwargs = dict(hidden_layer_sizes=(8,), learning_rate=0.01, epochs=4,
                      env_batch_size=3, block_size=5, random_state=11)
        a = RandomInterceptRegressor(**kwargs).fit(X, y, envs)
        b = RandomInterceptRegressor(**kwargs).fit(X, y, envs)
        assert np.array_equal(a.params_.values, b.params_.values)
        assert a.loss_trace_ == b.loss_trace_

    def test_block_subsampling_path(self):
        """Sub-block training runs, converges, and records a trace."""
        X, y, envs = linear_intercept_data(seed=7, n_envs=20, n_per_env=40)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(), learning_rate=0.02, epochs=10,
            env_batch_size=20, block_size=4, random_state=5,
        ).fit(X, y, envs)
        assert len(est.loss_trace_) == 10
        assert abs(est.params_.get("head")[0] - 1.0) < 0.15

    def test_requires_two_environments(self):
        X, y, envs = linear_intercept_data(seed=1, n_envs=1, n_per_env=30)
        with pytest.raises(ValueError, match="two training environments"):
            RandomInterceptRegressor().fit(X, y, envs)

    def test_env_label_validation(self):
        X, y, envs = linear_intercept_data(seed=1, n_envs=3, n_per_env=5)
        with pytest.raises(ValueError, match="one label per sample"):
            RandomInterceptRegressor().fit(X, y, envs[:-2])

    def test_divergence_reports_epoch_and_envs(self):
        X, y, envs = linear_intercept_data(seed=8, n_envs=4, n_per_env=10)
        with pytest.raises(FitDivergenceError, match="epoch"):
            RandomInterceptRegressor(
                hidden_layer_sizes=(8,), learning_rate=1e6, epochs=3, random_state=1
            ).fit(X, y, envs)

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            RandomInterceptRegressor().predict(np.zeros((2, 1)))

    def test_feature_width_checked_at_predict(self):
        X, y, envs = linear_intercept_data(seed=1, n_envs=3, n_per_env=5)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(), epochs=1, learning_rate=0.0
        ).fit(X, y, envs)
        with pytest.raises(ValueError, match="features"):
            est.predict(np.zeros((2, 3)))

    def test_env_loglik_matches_rule(self):
        X, y, envs = linear_intercept_data(seed=9, n_envs=3, n_per_env=6)
        est = RandomInterceptRegressor(
            hidden_layer_sizes=(), epochs=1, learning_rate=0.0
        ).fit(X, y, envs)
        total = est.env_loglik(X, y, envs)
        direct = 0.0
        for j in range(3):
            sel = envs == j
            u = X[sel] @ est.params_.get("head")
            direct += float(env_marginal_loglik(
                Gaussian(), u, y[sel], est.sigma_, GaussianClosedForm(), est.noise_scale_
            ))
        assert total == pytest.approx(direct, rel=1e-12)


class TestSignRule:
    def test_predict_equals_proba_argmax(self):
        X, y, envs = binary_intercept_data(seed=12, n_envs=20, n_per_env=40)
        est = RandomInterceptClassifier(
            hidden_layer_sizes=(8,), learning_rate=0.05, epochs=10, random_state=6
        ).fit(X, y, envs)
        grid = stream(30, "grid").standard_normal((500, 2)) * 3.0
        proba = est.predict_proba(grid)
        assert np.array_equal(est.predict(grid), est.classes_[np.argmax(proba, axis=1)])

    def test_tie_goes_to_class_one(self):
        X, y, envs = binary_intercept_data(seed=13, n_envs=4, n_per_env=10)
        est = RandomInterceptClassifier(
            hidden_layer_sizes=(4,), epochs=1, learning_rate=0.0
        ).fit(X, y, envs)
        # zero input makes every relu unit inactive: fixed part exactly 0
        zero = np.zeros((1, 2))
        assert est.decision_function(zero)[0] == 0.0
        assert est.predict(zero)[0] == est.classes_[1]

    def test_probabilities_well_formed(self):
        X, y, envs = binary_intercept_data(seed=14, n_envs=10, n_per_env=30)
        est = RandomInterceptClassifier(
            hidden_layer_sizes=(8,), learning_rate=0.05, epochs=5, random_state=2
        ).fit(X, y, envs)
        proba = est.predict_proba(X[:100])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(proba >= 0)

    def test_sign_rule_against_marginal_probability(self):
        """Over 1000 random (u, σ): p₁ >= 1/2 exactly when u >= 0."""
        rng = stream(15, "prop1")
        u = rng.uniform(-10, 10, 1000)
        sigma = rng.uniform(1e-3, 10.0, 1000)
        for ui, si in zip(u, sigma):
            p1 = float(bernoulli_marginal_prob(np.array([ui]), si, GaussHermite(64))[0])
            assert (p1 >= 0.5) == (ui >= 0.0)


class TestBaselines:
    def test_zero_penalty_trajectories_coincide(self):
        """ERM, IRM(λ=0), VaREx(λ=0) produce identical fits for one seed."""
        X, y, envs = binary_intercept_data(seed=16, n_envs=6, n_per_env=30)
        fits = [
            EnvPenaltyClassifier(
                method=method, penalty_weight=0.0, hidden_layer_sizes=(8,),
                learning_rate=0.05, epochs=4, random_state=21,
            ).fit(X, y, envs)
            for method in ("erm", "irm", "vrex")
        ]
        for other in fits[1:]:
            assert np.array_equal(fits[0].params_.values, other.params_.values)

    def test_penalty_changes_solution(self):
        X, y, envs = binary_intercept_data(seed=17, n_envs=6, n_per_env=50)
        base = EnvPenaltyClassifier(method="irm", penalty_weight=0.0,
                                    hidden_layer_sizes=(8,), learning_rate=0.05,
                                    epochs=6, random_state=3).fit(X, y, envs)
        pen = EnvPenaltyClassifier(method="irm", penalty_weight=20.0,
                                   hidden_layer_sizes=(8,), learning_rate=0.05,
                                   epochs=6, random_state=3).fit(X, y, envs)
        assert not np.array_equal(base.params_.values, pen.params_.values)

    def test_gaussian_baseline_predictive(self):
        X, y, envs = linear_intercept_data(seed=18, n_envs=40, n_per_env=25)
        est = EnvPenaltyRegressor(method="erm", hidden_layer_sizes=(),
                                  learning_rate=0.02, epochs=30,
                                  random_state=4).fit(X, y, envs)
        mean, var = est.predict_dist(X[:10])
        assert var.shape == (10,)
        # pooled residual spread: noise + intercept variance together
        assert np.all(var > 0.5**2)

    def test_unknown_method_rejected(self):
        X, y, envs = binary_intercept_data(seed=16, n_envs=4, n_per_env=10)
        with pytest.raises(ValueError, match="unknown method"):
            EnvPenaltyClassifier(method="dro").fit(X, y, envs)


class TestSklearnProtocol:
    def test_get_set_params_roundtrip(self):
        est = RandomInterceptClassifier(learning_rate=0.01, quad_order=48)
        params = est.get_params()
        assert params["learning_rate"] == 0.01 and params["quad_order"] == 48
        est.set_params(epochs=7)
        assert est.epochs == 7

    def test_clone_preserves_configuration(self):
        est = EnvPenaltyRegressor(method="vrex", penalty_weight=2.5, epochs=3)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_classifier_score(self):
        X, y, envs = binary_intercept_data(seed=19, n_envs=10, n_per_env=40)
        est = RandomInterceptClassifier(hidden_layer_sizes=(8,), learning_rate=0.05,
                                        epochs=8, random_state=5).fit(X, y, envs)
        assert est.score(X, y) > 0.6


class TestCheckpoints:
    def test_regressor_roundtrip(self, tmp_path):
        X, y, envs = linear_intercept_data(seed=20, n_envs=6, n_per_env=12)
        est = RandomInterceptRegressor(hidden_layer_sizes=(8,), learning_rate=0.01,
                                       epochs=3, random_state=8).fit(X, y, envs)
        path = tmp_path / "model.ckpt"
        est.save(path)
        back = load_estimator(path)
        np.testing.assert_array_equal(back.predict(X[:20]), est.predict(X[:20]))
        m1, v1 = back.predict_dist(X[:5])
        m0, v0 = est.predict_dist(X[:5])
        np.testing.assert_allclose(m1, m0)
        np.testing.assert_allclose(v1, v0)

    def test_classifier_roundtrip(self, tmp_path):
        X, y, envs = binary_intercept_data(seed=21, n_envs=6, n_per_env=20)
        est = RandomInterceptClassifier(hidden_layer_sizes=(8,), learning_rate=0.05,
                                        epochs=3, random_state=9).fit(X, y, envs)
        path = tmp_path / "clf.ckpt"
        est.save(path)
        back = load_estimator(path)
        np.testing.assert_array_equal(back.predict(X[:30]), est.predict(X[:30]))
        np.testing.assert_allclose(back.predict_proba(X[:30]), est.predict_proba(X[:30]))

    def test_penalty_model_roundtrip(self, tmp_path):
        X, y, envs = binary_intercept_data(seed=22, n_envs=6, n_per_env=20)
        est = EnvPenaltyClassifier(method="irm", penalty_weight=5.0,
                                   hidden_layer_sizes=(8,), learning_rate=0.05,
                                   epochs=2, random_state=10).fit(X, y, envs)
        path = tmp_path / "irm.ckpt"
        est.save(path)
        back = load_estimator(path)
        assert back.method == "irm" and back.penalty_weight == 5.0
        np.testing.assert_array_equal(back.predict(X[:30]), est.predict(X[:30]))

    def test_corrupted_checkpoint_detected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_estimator(path)
