"""Empirical evaluation: binary scores and Monte-Carlo environment-average risk.

Conventions (fixed, since reporting must be comparable across methods):

* accuracy thresholds p(y=1) at 0.5 with ties classified as 1, matching the
  sign rule used by the intercept classifier;
* NLL clamps probabilities to [1e-12, 1 - 1e-12] and flags when the clamp
  was active; other metrics use the raw values;
* ECE uses 10 equal-width bins on p(y=1) in [0, 1], confidence = mean
  predicted p(y=1) in the bin, accuracy = mean label in the bin, so a
  constant calibrated predictor scores exactly 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from envmix.datasets import TradeoffConfig, generate_tradeoff
from envmix.exact import _effect_multiplier  # shared generator arithmetic

__all__ = [
    "evaluate_binary",
    "EvalReport",
    "estimate_env_avg_risk",
    "gaussian_kl",
]

_CLAMP = 1e-12


def evaluate_binary(p1, labels, n_bins=10):
    """Accuracy / NLL / Brier / ECE for binary probabilistic predictions."""
    p1 = np.asarray(p1, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if p1.shape != labels.shape or p1.ndim != 1:
        raise ValueError("predictions and labels must be equal-length vectors")
    if np.any((p1 < 0) | (p1 > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")

    predicted = (p1 >= 0.5).astype(np.float64)
    accuracy = float(np.mean(predicted == labels))

    clipped = np.clip(p1, _CLAMP, 1.0 - _CLAMP)
    clamped = bool(np.any(clipped != p1))
    nll = float(-np.mean(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped)))

    brier = float(np.mean((p1 - labels) ** 2))

    bins = np.minimum((p1 * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    n = p1.shape[0]
    for b in range(n_bins):
        in_bin = bins == b
        if not np.any(in_bin):
            continue
        conf = np.mean(p1[in_bin])
        acc = np.mean(labels[in_bin])
        ece += (np.sum(in_bin) / n) * abs(acc - conf)
    return {
        "accuracy": accuracy,
        "nll": nll,
        "brier": brier,
        "ece": float(ece),
        "clamped": clamped,
    }


@dataclass
class EvalReport:
    """Per-environment and pooled metric values with counts."""

    per_env: dict = field(default_factory=dict)  # env id -> metrics dict
    pooled: dict = field(default_factory=dict)

    def rows(self, method, seed):
        """CSV rows (method, env_id, metric, value, stderr, seed)."""
        out = []
        for env_id, metrics in self.per_env.items():
            for name, value in metrics.items():
                if name in ("clamped", "count"):
                    continue
                out.append((method, env_id, name, value, "", seed))
        for name, value in self.pooled.items():
            if name in ("clamped", "count"):
                continue
            out.append((method, "pooled", name, value, "", seed))
        return out


def report_binary(predict_proba, dataset, n_bins=10) -> EvalReport:
    """Evaluate a p(y=1 | x) callable per environment and pooled."""
    report = EvalReport()
    all_p, all_y = [], []
    for env_id, (X, y) in zip(dataset.env_ids, dataset.blocks):
        p1 = np.asarray(predict_proba(X), dtype=np.float64)
        metrics = evaluate_binary(p1, y, n_bins=n_bins)
        metrics["count"] = y.shape[0]
        report.per_env[env_id] = metrics
        all_p.append(p1)
        all_y.append(y)
    pooled = evaluate_binary(np.concatenate(all_p), np.concatenate(all_y), n_bins=n_bins)
    pooled["count"] = sum(len(y) for y in all_y)
    report.pooled = pooled
    return report


def gaussian_kl(mean_p, var_p, mean_q, var_q):
    """KL(N(mean_p, var_p) || N(mean_q, var_q)), elementwise."""
    var_q = np.asarray(var_q, dtype=np.float64)
    if np.any(var_q <= 0) or np.any(np.asarray(var_p) <= 0):
        raise ValueError("variances must be positive")
    return 0.5 * (
        np.log(var_q / var_p) + (var_p + (mean_p - mean_q) ** 2) / var_q - 1.0
    )


def estimate_env_avg_risk(
    predict_dist,
    config: TradeoffConfig,
    n_envs=20,
    n_per_env=500,
    seed=0,
    conditional=False,
):
    """Monte-Carlo environment-average KL risk on fresh environments.

    Draws ``n_envs`` new environments from the generator, evaluates the
    pointwise KL between the known conditional p(y | x, e) and the
    predictor's Gaussian predictive, and aggregates per environment. The
    standard error comes from the spread of per-environment mean KLs, which
    respects the within-environment correlation induced by the shared
    latent effect. Returns (risk, se).

    With ``conditional=True`` the predictor is called as
    ``predict_dist(X, env_effect)`` — a diagnostic mode for oracles that
    know the environment.
    """
    if n_envs * n_per_env < 10**3:
        raise ValueError("use at least 1000 Monte-Carlo draws")
    eval_config = TradeoffConfig(
        alpha=config.alpha,
        regime=config.regime,
        sigma_e=config.sigma_e,
        sigma_c=config.sigma_c,
        sigma_u=config.sigma_u,
        sigma_eps=config.sigma_eps,
        n_envs=n_envs,
        n_per_env=n_per_env,
        seed=seed,
    )
    dataset, latents = generate_tradeoff(eval_config)
    env_means = []
    for env_id, (X, _) in zip(dataset.env_ids, dataset.blocks):
        e = latents[env_id]
        c = X[:, 0]
        k = _effect_multiplier(config, c)
        true_mean = c + k * e
        true_var = np.full_like(true_mean, config.sigma_eps**2)
        if conditional:
            mean_q, var_q = predict_dist(X, e)
        else:
            mean_q, var_q = predict_dist(X)
        kl = gaussian_kl(true_mean, true_var, np.asarray(mean_q), np.asarray(var_q))
        env_means.append(float(kl.mean()))
    env_means = np.asarray(env_means)
    risk = float(env_means.mean())
    se = float(env_means.std(ddof=1) / np.sqrt(len(env_means)))
    return risk, se
