"""Prediction across heterogeneous environments via explicit intercept modeling.

The package provides:

* estimators with a scikit-learn interface: :class:`RandomInterceptRegressor`
  and :class:`RandomInterceptClassifier` fit a neural fixed part plus a
  latent per-environment intercept by marginal likelihood, while
  :class:`EnvPenaltyRegressor` / :class:`EnvPenaltyClassifier` implement the
  pooled-risk and invariance-penalty comparison methods (ERM, IRM, VaREx);
* exact ground-truth machinery (:mod:`envmix.exact`) for risk decompositions
  and closed-form reference risks on the synthetic generators;
* synthetic multi-environment data generators (:mod:`envmix.datasets`);
* an experiment CLI (``envmix tradeoff|colored|identities|fit|eval``).
"""

from envmix.autodiff import AdamState, ParamVector, adam_step, forward_backward
from envmix.datasets import (
    ColoredConfig,
    EnvDataset,
    TradeoffConfig,
    generate_colored,
    generate_tradeoff,
)
from envmix.estimators import (
    EnvPenaltyClassifier,
    EnvPenaltyRegressor,
    RandomInterceptClassifier,
    RandomInterceptRegressor,
    load_estimator,
)
from envmix.exact import (
    DiscreteJoint,
    RiskReport,
    bayes_accuracy_colored,
    bayes_risk_misspecified,
    bayes_risk_well_specified,
    mi_tradeoff,
    risk_report,
)
from envmix.families import BernoulliLogit, Gaussian
from envmix.metrics import estimate_env_avg_risk, evaluate_binary
from envmix.quadrature import (
    GaussHermite,
    GaussianClosedForm,
    TruncatedGrid,
    env_marginal_loglik,
    marginal_predictive,
)

__version__ = "0.1.0"
