"""Scikit-learn style estimators for multi-environment prediction.

Two model families share one fixed-part architecture (an MLP body with a
linear head, see :mod:`envmix.nnet`):

* ``RandomInterceptRegressor`` / ``RandomInterceptClassifier`` add a latent
  per-environment intercept γ ~ N(0, σ²) and fit (network, head, σ, and for
  Gaussian responses the noise scale) by maximizing the per-environment
  marginal likelihood, with the intercept integrated out by a quadrature
  rule or, for Gaussian responses, in closed form. Prediction in an unseen
  environment marginalizes the intercept over its fitted prior; for binary
  responses the label decision reduces to the sign of the fixed part.

* ``EnvPenaltyRegressor`` / ``EnvPenaltyClassifier`` are the comparison
  methods: uniform-over-environments empirical risk, optionally plus an IRM
  dummy-scale penalty or a VaREx risk-variance penalty.

Minibatches are formed over environments. By default each batch carries
complete environments, so every gradient step sees full per-environment
integrals. The optional ``block_size`` instead subsamples that many
observations inside each selected environment per step (the marginal
integral then couples the sampled block); small blocks reproduce
small-batch stochastic training and are the right choice when environment
effects also leak into the features, where full-environment integrals let
the intercept absorb signal the fixed part should carry.

All estimators support ``get_params``/``set_params``/``clone`` and validate
inputs with the scikit-learn helpers. ``fit`` takes the per-observation
environment labels as a third argument: ``fit(X, y, envs)``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from envmix import autodiff as ad
from envmix import objectives
from envmix.checkpoint import load_checkpoint, save_checkpoint
from envmix.families import BernoulliLogit, Gaussian, inverse_softplus
from envmix.nnet import init_mlp, mlp_fixed_part
from envmix.quadrature import (
    GaussHermite,
    GaussianClosedForm,
    TruncatedGrid,
    env_marginal_loglik,
    env_marginal_loglik_blocks,
    marginal_predictive,
)
from envmix.rng import stream
from envmix.validation import check_env_labels, group_indices

__all__ = [
    "FitDivergenceError",
    "RandomInterceptRegressor",
    "RandomInterceptClassifier",
    "EnvPenaltyRegressor",
    "EnvPenaltyClassifier",
    "load_estimator",
]


class FitDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def _build_rule(rule, family, quad_order, grid_half_width, grid_steps):
    if isinstance(rule, (GaussHermite, TruncatedGrid, GaussianClosedForm)):
        return rule
    if rule == "auto":
        rule = "closed-form" if not family.is_binary else "gauss-hermite"
    if rule == "gauss-hermite":
        return GaussHermite(quad_order)
    if rule == "grid":
        return TruncatedGrid(grid_half_width, grid_steps)
    if rule == "closed-form":
        return GaussianClosedForm()
    raise ValueError(f"unknown marginalization rule {rule!r}")


def _rule_repr(rule):
    if isinstance(rule, GaussHermite):
        return f"gauss-hermite({rule.order})"
    if isinstance(rule, TruncatedGrid):
        return f"grid({rule.half_width},{rule.steps})"
    return "closed-form"


def _parse_rule(text):
    kind, _, args = text.partition("(")
    args = args.rstrip(")")
    if kind == "gauss-hermite":
        return GaussHermite(int(args))
    if kind == "grid":
        half, steps = args.split(",")
        return TruncatedGrid(float(half), int(steps))
    return GaussianClosedForm()


def _softplus_scalar(raw):
    """softplus of a 0-d parameter, on or off the tape."""
    if isinstance(raw, ad.Node):
        return ad.softplus(raw)
    return float(np.logaddexp(0.0, raw))


class _EnvFitMixin:
    """Shared environment-minibatch Adam loop."""

    def _validate(self, X, y, envs, binary):
        X, y = check_X_y(X, y, dtype=np.float64, ensure_all_finite=True)
        envs = check_env_labels(envs, X.shape[0])
        if binary:
            classes = np.unique(y)
            if classes.shape[0] != 2:
                raise ValueError("binary classification requires exactly two classes")
            y = (y == classes[1]).astype(np.float64)
            self.classes_ = classes
        else:
            y = np.asarray(y, dtype=np.float64)
        labels, groups = group_indices(envs)
        if len(groups) < 2:
            raise ValueError("fitting requires at least two training environments")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        self.n_features_in_ = X.shape[1]
        self.env_labels_ = labels
        return X, y, groups

    def _epoch_batches(self, groups, order_rng):
        """Index blocks for one epoch of environment minibatches.

        With ``block_size`` unset, every batch holds complete environments
        and an epoch is one pass over the environment list. With
        ``block_size = k``, each step draws a random environment subset and
        k observations within each (the marginal integral then couples the
        sampled block), and an epoch takes enough steps to visit roughly
        the whole dataset once in expectation.
        """
        n_groups = len(groups)
        batch = min(self.env_batch_size, n_groups)
        block = getattr(self, "block_size", None)
        if block is None:
            perm = order_rng.permutation(n_groups)
            for start in range(0, n_groups, batch):
                chosen = perm[start : start + batch]
                yield chosen, [groups[i] for i in chosen]
            return
        total = sum(g.size for g in groups)
        steps = max(1, int(round(total / (batch * block))))
        for _ in range(steps):
            chosen = order_rng.choice(n_groups, size=batch, replace=False)
            blocks = []
            for i in chosen:
                take = min(block, groups[i].size)
                rows = order_rng.choice(groups[i].size, size=take, replace=False)
                blocks.append(groups[i][np.sort(rows)])
            yield chosen, blocks

    def _run_adam(self, param_arrays, objective_for, groups):
        params = ad.ParamVector.from_arrays(param_arrays)
        state = ad.AdamState.zeros(params)
        order_rng = stream(self.random_state, "env-order")
        self.loss_trace_ = []
        for epoch in range(self.epochs):
            epoch_loss, seen = 0.0, 0
            for chosen, blocks in self._epoch_batches(groups, order_rng):
                try:
                    value, grad = ad.forward_backward(objective_for(blocks), params)
                except ad.NonFiniteError as err:
                    raise FitDivergenceError(
                        f"non-finite loss at epoch {epoch} on environments "
                        f"{[self.env_labels_[i] for i in chosen]}: {err}"
                    ) from err
                if self.learning_rate > 0.0:
                    params, state = ad.adam_step(params, grad, state, self.learning_rate)
                epoch_loss += value * len(chosen)
                seen += len(chosen)
            self.loss_trace_.append(epoch_loss / seen)
            if self.verbose:
                print(f"epoch {epoch + 1}/{self.epochs}: loss {self.loss_trace_[-1]:.6f}")
        return params

    def _fixed_part(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return mlp_fixed_part(self.params_.unpack(), X)


class _RandomInterceptBase(_EnvFitMixin, BaseEstimator):
    def __init__(
        self,
        hidden_layer_sizes=(32, 32),
        rule="auto",
        quad_order=32,
        grid_half_width=10.0,
        grid_steps=512,
        learning_rate=1e-3,
        epochs=20,
        env_batch_size=8,
        block_size=None,
        sigma_init=0.5,
        noise_init=1.0,
        freeze_noise=False,
        random_state=0,
        verbose=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.rule = rule
        self.quad_order = quad_order
        self.grid_half_width = grid_half_width
        self.grid_steps = grid_steps
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.env_batch_size = env_batch_size
        self.block_size = block_size
        self.sigma_init = sigma_init
        self.noise_init = noise_init
        self.freeze_noise = freeze_noise
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y, envs):
        family = self._family
        X, y, groups = self._validate(X, y, envs, family.is_binary)
        rule = _build_rule(
            self.rule, family, self.quad_order, self.grid_half_width, self.grid_steps
        )
        if isinstance(rule, GaussianClosedForm) and family.is_binary:
            raise ValueError("the closed-form rule applies to Gaussian responses only")
        arrays = init_mlp(
            self.random_state, self.n_features_in_, tuple(self.hidden_layer_sizes)
        )
        arrays["sigma_raw"] = np.array(inverse_softplus(self.sigma_init))
        gaussian = isinstance(family, Gaussian)
        if gaussian and not self.freeze_noise:
            arrays["noise_raw"] = np.array(inverse_softplus(self.noise_init))
        frozen_noise = float(self.noise_init)

        def objective_for(blocks):
            idx = np.concatenate(blocks)
            sizes = [b.size for b in blocks]
            stops = np.cumsum(sizes)
            uniform = len(set(sizes)) == 1
            Xb, yb = X[idx], y[idx]

            def objective(leaves):
                sigma = _softplus_scalar(leaves["sigma_raw"])
                noise = None
                if gaussian:
                    noise = (
                        _softplus_scalar(leaves["noise_raw"])
                        if "noise_raw" in leaves
                        else frozen_noise
                    )
                u_all = mlp_fixed_part(leaves, Xb)
                if uniform:
                    shape = (len(blocks), sizes[0])
                    total = env_marginal_loglik_blocks(
                        family, ad.reshape(u_all, shape), yb.reshape(shape),
                        sigma, rule, noise,
                    )
                else:
                    total = None
                    for start, stop in zip(np.r_[0, stops[:-1]], stops):
                        u = ad.slice_rows(u_all, start, stop)
                        ll = env_marginal_loglik(family, u, yb[start:stop], sigma, rule, noise)
                        total = ll if total is None else ad.add(total, ll)
                return ad.div(ad.neg(total), float(len(blocks)))

            return objective

        self.params_ = self._run_adam(arrays, objective_for, groups)
        self.sigma_ = float(np.logaddexp(0.0, self.params_.get("sigma_raw")))
        if gaussian:
            self.noise_scale_ = (
                frozen_noise
                if self.freeze_noise
                else float(np.logaddexp(0.0, self.params_.get("noise_raw")))
            )
        self.rule_ = rule
        return self

    def env_loglik(self, X, y, envs):
        """Summed per-environment marginal log-likelihood at the fitted parameters."""
        check_is_fitted(self, "params_")
        family = self._family
        X, y = check_X_y(X, y, dtype=np.float64, ensure_all_finite=True)
        if family.is_binary:
            y = (y == self.classes_[1]).astype(np.float64)
        envs = check_env_labels(envs, X.shape[0])
        _, groups = group_indices(envs)
        unpacked = self.params_.unpack()
        noise = getattr(self, "noise_scale_", None)
        total = 0.0
        for idx in groups:
            u = mlp_fixed_part(unpacked, X[idx])
            total += float(
                env_marginal_loglik(family, u, y[idx], self.sigma_, self.rule_, noise)
            )
        return total

    def save(self, path):
        check_is_fitted(self, "params_")
        header = {
            "model": type(self).__name__,
            "family": self._family.name,
            "hidden": ",".join(str(h) for h in self.hidden_layer_sizes),
            "rule": _rule_repr(self.rule_),
            "seed": str(self.random_state),
            "n_features": str(self.n_features_in_),
            "sigma": repr(self.sigma_),
        }
        if self._family.is_binary:
            header["classes"] = ",".join(repr(float(c)) for c in self.classes_)
        else:
            header["noise_scale"] = repr(self.noise_scale_)
        save_checkpoint(path, header, self.params_.unpack())


class RandomInterceptRegressor(_RandomInterceptBase, RegressorMixin):
    """Gaussian-response random-intercept model fit by marginal likelihood."""

    _family = Gaussian()

    def predict(self, X):
        """Predictive mean for inputs from unseen environments (fixed part)."""
        return self._fixed_part(X)

    def predict_dist(self, X):
        """Predictive (mean, variance); variance is noise² + σ²."""
        mean = self._fixed_part(X)
        _, var = marginal_predictive(
            self._family, mean, self.sigma_, self.rule_, self.noise_scale_
        )
        return mean, var


class RandomInterceptClassifier(_RandomInterceptBase, ClassifierMixin):
    """Binary random-intercept model; label decisions use the fixed part only."""

    _family = BernoulliLogit()

    def decision_function(self, X):
        """Fixed component βᵀf(x); positive values map to ``classes_[1]``."""
        return self._fixed_part(X)

    def predict(self, X):
        """Sign rule: class 1 iff the fixed part is >= 0 (ties go to class 1).

        Agrees with the argmax of :meth:`predict_proba` for every σ > 0,
        without computing the marginalization.
        """
        return self.classes_[(self.decision_function(X) >= 0.0).astype(int)]

    def predict_proba(self, X):
        """Marginal predictive p(y | x) with the intercept integrated out."""
        p1 = marginal_predictive(
            self._family, self.decision_function(X), self.sigma_, self.rule_
        )
        return np.column_stack([1.0 - p1, p1])


class _EnvPenaltyBase(_EnvFitMixin, BaseEstimator):
    def __init__(
        self,
        method="erm",
        penalty_weight=0.0,
        hidden_layer_sizes=(32, 32),
        learning_rate=1e-3,
        epochs=20,
        env_batch_size=8,
        block_size=None,
        noise_init=1.0,
        random_state=0,
        verbose=0,
    ):
        self.method = method
        self.penalty_weight = penalty_weight
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.env_batch_size = env_batch_size
        self.block_size = block_size
        self.noise_init = noise_init
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y, envs):
        family = self._family
        if self.method not in ("erm", "irm", "vrex"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be nonnegative")
        X, y, groups = self._validate(X, y, envs, family.is_binary)
        arrays = init_mlp(
            self.random_state, self.n_features_in_, tuple(self.hidden_layer_sizes)
        )
        gaussian = isinstance(family, Gaussian)
        if gaussian:
            arrays["noise_raw"] = np.array(inverse_softplus(self.noise_init))
        lam = float(self.penalty_weight)
        method = self.method

        def objective_for(blocks):
            idx = np.concatenate(blocks)
            sizes = [b.size for b in blocks]
            stops = np.cumsum(sizes)
            uniform = len(set(sizes)) == 1
            Xb, yb = X[idx], y[idx]

            def objective(leaves):
                noise = _softplus_scalar(leaves["noise_raw"]) if gaussian else None
                u_all = mlp_fixed_part(leaves, Xb)
                if uniform:
                    shape = (len(blocks), sizes[0])
                    U, Y = ad.reshape(u_all, shape), yb.reshape(shape)
                    risks = objectives.env_mean_nll_rows(family, U, Y, noise)
                    loss = ad.mean(risks)
                    if method == "irm" and lam > 0.0:
                        pens = objectives.irm_penalty_rows(family, U, Y, noise)
                        loss = ad.add(loss, ad.mul(lam, ad.mean(pens)))
                    elif method == "vrex" and lam > 0.0:
                        loss = ad.add(loss, ad.mul(lam, objectives.varex_penalty(risks)))
                    return loss
                risks, penalties = [], []
                for start, stop in zip(np.r_[0, stops[:-1]], stops):
                    u = ad.slice_rows(u_all, start, stop)
                    yk = yb[start:stop]
                    risks.append(objectives.env_mean_nll(family, u, yk, noise))
                    if method == "irm" and lam > 0.0:
                        penalties.append(objectives.irm_penalty(family, u, yk, noise))
                total = risks[0]
                for r in risks[1:]:
                    total = ad.add(total, r)
                loss = ad.div(total, float(len(risks)))
                if penalties:
                    pen = penalties[0]
                    for p in penalties[1:]:
                        pen = ad.add(pen, p)
                    loss = ad.add(loss, ad.mul(lam / len(penalties), pen))
                elif method == "vrex" and lam > 0.0:
                    loss = ad.add(loss, ad.mul(lam, objectives.varex_penalty(risks)))
                return loss

            return objective

        self.params_ = self._run_adam(arrays, objective_for, groups)
        if gaussian:
            self.noise_scale_ = float(np.logaddexp(0.0, self.params_.get("noise_raw")))
        return self

    def save(self, path):
        check_is_fitted(self, "params_")
        header = {
            "model": type(self).__name__,
            "family": self._family.name,
            "method": self.method,
            "penalty_weight": repr(float(self.penalty_weight)),
            "hidden": ",".join(str(h) for h in self.hidden_layer_sizes),
            "seed": str(self.random_state),
            "n_features": str(self.n_features_in_),
        }
        if self._family.is_binary:
            header["classes"] = ",".join(repr(float(c)) for c in self.classes_)
        else:
            header["noise_scale"] = repr(self.noise_scale_)
        save_checkpoint(path, header, self.params_.unpack())


class EnvPenaltyRegressor(_EnvPenaltyBase, RegressorMixin):
    """Gaussian-NLL baseline: uniform env risk plus an optional IRM/VaREx penalty."""

    _family = Gaussian()

    def predict(self, X):
        return self._fixed_part(X)

    def predict_dist(self, X):
        mean = self._fixed_part(X)
        return mean, np.full_like(mean, self.noise_scale_**2)


class EnvPenaltyClassifier(_EnvPenaltyBase, ClassifierMixin):
    """Logistic baseline: uniform env risk plus an optional IRM/VaREx penalty."""

    _family = BernoulliLogit()

    def decision_function(self, X):
        return self._fixed_part(X)

    def predict(self, X):
        return self.classes_[(self.decision_function(X) >= 0.0).astype(int)]

    def predict_proba(self, X):
        p1 = ad.logistic(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])


_MODEL_CLASSES = {
    "RandomInterceptRegressor": RandomInterceptRegressor,
    "RandomInterceptClassifier": RandomInterceptClassifier,
    "EnvPenaltyRegressor": EnvPenaltyRegressor,
    "EnvPenaltyClassifier": EnvPenaltyClassifier,
}


def load_estimator(path):
    """Rebuild a fitted estimator from a checkpoint written by ``save``."""
    header, arrays = load_checkpoint(path)
    cls = _MODEL_CLASSES[header["model"]]
    hidden = tuple(int(h) for h in header["hidden"].split(","))
    kwargs = {"hidden_layer_sizes": hidden, "random_state": int(header["seed"])}
    if issubclass(cls, _EnvPenaltyBase):
        kwargs["method"] = header["method"]
        kwargs["penalty_weight"] = float(header["penalty_weight"])
    est = cls(**kwargs)
    est.params_ = ad.ParamVector.from_arrays(arrays)
    est.n_features_in_ = int(header["n_features"])
    if "classes" in header:
        est.classes_ = np.array([float(c) for c in header["classes"].split(",")])
    if "sigma" in header:
        est.sigma_ = float(header["sigma"])
        est.rule_ = _parse_rule(header["rule"])
    if "noise_scale" in header:
        est.noise_scale_ = float(header["noise_scale"])
    return est
