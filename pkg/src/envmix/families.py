"""Exponential-family response models for the conditional density q(y | x, γ).

Both families parameterize the conditional through a single real input
``eta = u + gamma``, the sum of the fixed component u = βᵀf(x) and the
latent environment intercept γ. For the Bernoulli family eta is the natural
parameter directly; for the Gaussian family (identity link, noise scale
σ_eps) eta is the conditional mean.

All methods accept either numpy arrays or tape nodes, so the same code path
serves evaluation and gradient-based fitting.
"""

from __future__ import annotations

import numpy as np

from envmix import autodiff as ad

__all__ = ["Gaussian", "BernoulliLogit", "softplus_raw", "inverse_softplus"]

_LOG_2PI = float(np.log(2.0 * np.pi))


def softplus_raw(raw):
    """Map an unconstrained scale parameter to (0, inf)."""
    return ad.softplus(raw)


def inverse_softplus(value: float) -> float:
    """Raw parameter whose softplus equals ``value`` (> 0)."""
    if value <= 0:
        raise ValueError("scale must be positive")
    # log(e^v - 1), stable for large v
    return float(value + np.log1p(-np.exp(-value)))


class Gaussian:
    """Gaussian response with identity link and noise scale sigma_eps.

    One-parameter exponential family with the scale known: natural parameter
    theta = mu / sigma_eps^2, log-partition A(theta) = theta^2 sigma_eps^2 / 2
    and base measure log h(y) = -y^2 / (2 sigma_eps^2) - log(2 pi sigma_eps^2)/2.
    """

    name = "gaussian"
    is_binary = False

    def check_response(self, y):
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise ValueError("Gaussian responses must be finite")
        return y

    def check_noise_scale(self, noise_scale):
        if not isinstance(noise_scale, ad.Node) and noise_scale <= 0:
            raise ValueError("noise scale sigma_eps must be positive")
        return noise_scale

    def log_density(self, y, eta, noise_scale):
        """log N(y; eta, noise_scale^2), elementwise with broadcasting."""
        self.check_noise_scale(noise_scale)
        var = ad.square(noise_scale)
        resid = ad.sub(y, eta)
        return ad.sub(
            ad.div(ad.square(resid), -2.0 * var),
            0.5 * _LOG_2PI + ad.log(noise_scale),
        )

    def mean(self, eta, noise_scale=None):
        return eta

    def natural_param(self, eta, noise_scale):
        return ad.div(eta, ad.square(noise_scale))

    def log_partition(self, theta, noise_scale):
        return ad.mul(ad.square(theta), 0.5 * ad.square(noise_scale))

    def log_base_measure(self, y, noise_scale):
        var = ad.square(noise_scale)
        return ad.sub(ad.div(ad.square(y), -2.0 * var), 0.5 * (_LOG_2PI) + ad.log(noise_scale))


class BernoulliLogit:
    """Bernoulli response with the logistic inverse link.

    The inverse link satisfies 1 - sigma(u) = sigma(-u); this symmetry is
    what makes classification in a new environment depend on the fixed
    component only.
    """

    name = "bernoulli"
    is_binary = True

    def check_response(self, y):
        y = np.asarray(y, dtype=np.float64)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise ValueError("Bernoulli responses must be 0 or 1")
        return y

    def log_density(self, y, eta, noise_scale=None):
        """log q(y | eta) = y*eta - softplus(eta), computed as -softplus(-s*eta)."""
        signs = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
        return ad.neg(ad.softplus(ad.neg(ad.mul(signs, eta))))

    def mean(self, eta, noise_scale=None):
        return ad.logistic(eta)

    def natural_param(self, eta, noise_scale=None):
        return eta

    def log_partition(self, theta, noise_scale=None):
        return ad.softplus(theta)

    def log_base_measure(self, y, noise_scale=None):
        return np.zeros_like(np.asarray(y, dtype=np.float64))


def family_by_name(name: str):
    if name == "gaussian":
        return Gaussian()
    if name == "bernoulli":
        return BernoulliLogit()
    raise ValueError(f"unknown response family '{name}'")
