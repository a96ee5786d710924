"""Small fully-connected networks used as the shared fixed-effect predictor.

The predictor is u(x) = βᵀ f(x) where f is an MLP body with relu
activations and β is a final head vector without bias (constant offsets are
representable through the hidden biases). All methods in the package share
this architecture.
"""

from __future__ import annotations

import numpy as np

from envmix import autodiff as ad
from envmix.rng import stream

__all__ = ["init_mlp", "mlp_fixed_part", "mlp_param_names"]


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def mlp_param_names(n_hidden_layers: int) -> list:
    names = []
    for i in range(n_hidden_layers):
        names += [f"w{i}", f"b{i}"]
    names.append("head")
    return names


def init_mlp(seed: int, in_dim: int, hidden: tuple) -> dict:
    """Glorot-uniform weights, zero biases, for layers in_dim -> hidden -> 1.

    An empty ``hidden`` gives the linear model u(x) = headᵀx (identity body).
    """
    rng = stream(seed, "mlp-init")
    params = {}
    dims = [in_dim] + list(hidden)
    for i in range(len(hidden)):
        params[f"w{i}"] = _glorot(rng, dims[i], dims[i + 1])
        params[f"b{i}"] = np.zeros(dims[i + 1])
    params["head"] = _glorot(rng, dims[-1], 1).ravel()
    return params


def mlp_fixed_part(params, x):
    """Fixed component u(x) for a batch x of shape (n, in_dim); returns (n,)."""
    h = x
    i = 0
    while f"w{i}" in params:
        h = ad.relu(ad.affine(h, params[f"w{i}"], params[f"b{i}"]))
        i += 1
    return ad.matmul(h, params["head"])
