"""Training objectives for the comparison methods (ERM, IRM, VaREx).

The invariance penalties follow their original definitions:

* IRM uses the squared derivative of the per-environment risk with respect
  to a scalar dummy multiplier on the model output, evaluated at 1. For
  both losses used here the dummy-scale derivative has a closed form in the
  outputs, so the penalty is an ordinary first-order expression:

      logistic loss:  d/dw mean ℓ(w·u, y) |_{w=1} = mean u (sigma(u) - y)
      Gaussian NLL:   d/dw mean ℓ(w·u, y) |_{w=1} = mean u (u - y) / σ_n²

* VaREx penalizes the population variance of the per-environment risks.

Per-environment risks are weighted uniformly (not by environment size) in
penalized objectives; pooled ERM over observations is available separately
as :func:`erm_loss`.
"""

from __future__ import annotations

import numpy as np

from envmix import autodiff as ad
from envmix.families import Gaussian

__all__ = ["erm_loss", "env_mean_nll", "irm_penalty", "varex_penalty"]


def env_mean_nll(family, fixed, y, noise_scale=None):
    """Mean negative log-likelihood of one environment under the fixed part."""
    if isinstance(family, Gaussian):
        ll = family.log_density(y, fixed, noise_scale)
    else:
        ll = family.log_density(y, fixed)
    return ad.neg(ad.mean(ll))


def erm_loss(family, fixed_blocks, y_blocks, noise_scale=None):
    """Pooled mean NLL over all observations, ignoring environment structure."""
    total = None
    count = 0
    for fixed, y in zip(fixed_blocks, y_blocks):
        if isinstance(family, Gaussian):
            ll = family.log_density(y, fixed, noise_scale)
        else:
            ll = family.log_density(y, fixed)
        s = ad.sum(ll)
        total = s if total is None else ad.add(total, s)
        count += np.asarray(y).shape[0]
    return ad.div(ad.neg(total), float(count))


def env_mean_nll_rows(family, fixed, y, noise_scale=None):
    """Per-row mean NLL for a (B, k) batch of equal-size environment blocks."""
    if isinstance(family, Gaussian):
        ll = family.log_density(y, fixed, noise_scale)
    else:
        ll = family.log_density(y, fixed)
    return ad.neg(ad.mean(ll, axis=1))


def irm_penalty_rows(family, fixed, y, noise_scale=None):
    """Row-wise IRM penalties for a (B, k) batch; returns a length-B vector."""
    y = np.asarray(y, dtype=np.float64)
    if isinstance(family, Gaussian):
        d = ad.div(
            ad.mean(ad.mul(fixed, ad.sub(fixed, y)), axis=1),
            ad.square(noise_scale),
        )
    else:
        d = ad.mean(ad.mul(fixed, ad.sub(ad.logistic(fixed), y)), axis=1)
    return ad.square(d)


def irm_penalty(family, fixed, y, noise_scale=None):
    """Squared dummy-scale gradient of one environment's risk at scale 1."""
    y = np.asarray(y, dtype=np.float64)
    if isinstance(family, Gaussian):
        d = ad.div(
            ad.mean(ad.mul(fixed, ad.sub(fixed, y))),
            ad.square(noise_scale),
        )
    else:
        d = ad.mean(ad.mul(fixed, ad.sub(ad.logistic(fixed), y)))
    return ad.square(d)


def varex_penalty(per_env_risks):
    """Population variance of the per-environment risks.

    Accepts a plain vector, a vector tape node, or a list of scalar nodes.
    """
    if isinstance(per_env_risks, (list, tuple)):
        risks = ad.stack(list(per_env_risks))
    elif isinstance(per_env_risks, ad.Node):
        risks = per_env_risks
    else:
        risks = np.asarray(per_env_risks, dtype=np.float64)
    return ad.sub(ad.mean(ad.square(risks)), ad.square(ad.mean(risks)))
