"""Exact ground-truth computations for risks, decompositions and references.

Two kinds of oracle live here:

* finite enumeration on :class:`DiscreteJoint` tables p(e, x, y) — the
  environment-average and marginal risks, their decomposition identities,
  conditional mutual informations with the chain-rule check, the
  representation-vs-intercept tradeoff quantity, and an exhaustive search
  for minimal zero-risk representations on tiny supports;

* closed forms for the synthetic generators — the optimal environment-
  average risk of the Gaussian tradeoff simulation (both regimes, the
  misspecified one through 128-node quadrature over the causal marginal)
  and the exact accuracy of the best predictor under the colored label
  mechanism. Each closed form has an independent Monte-Carlo cross-check.

All enumeration uses the measure-zero convention: cells with zero
conditioning probability contribute nothing and are counted in the report.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import csv

import numpy as np

from envmix.datasets import (
    P_COLOR_GIVEN_EVEN,
    P_COLOR_GIVEN_ODD,
    ColoredConfig,
    TradeoffConfig,
    colored_cell_probs,
)
from envmix.rng import stream

__all__ = [
    "DiscreteJoint",
    "RiskReport",
    "risk_report",
    "check_excess_risk",
    "mi_tradeoff",
    "conditional_mutual_information",
    "bayes_risk_well_specified",
    "bayes_risk_misspecified",
    "monte_carlo_bayes_risk",
    "bayes_accuracy_colored",
    "marginal_oracle",
    "conditional_oracle",
    "posterior_variance",
    "all_partition_maps",
    "representation_risk",
    "zero_risk_maps",
    "minimal_representation",
    "random_joint",
    "invariant_generative_joint",
]


# ---------------------------------------------------------------------------
# Discrete joints


@dataclass
class DiscreteJoint:
    """Exact finite joint p(e, x, y) stored as a (|E|, |X|, |Y|) table."""

    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 3:
            raise ValueError("the joint table must have axes (e, x, y)")
        if np.any(table < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(table.sum() - 1.0) > 1e-12:
            raise ValueError(f"the table sums to {table.sum()!r}, not 1")
        self.table = table

    @property
    def shape(self):
        return self.table.shape

    def p_ex(self):
        return self.table.sum(axis=2)

    def p_x(self):
        return self.table.sum(axis=(0, 2))

    def p_xy(self):
        return self.table.sum(axis=0)

    def cond_y_given_xe(self):
        """p(y | x, e) as an (E, X, Y) table; zero-mass cells stay zero."""
        p_ex = self.p_ex()
        out = np.zeros_like(self.table)
        mask = p_ex > 0
        out[mask] = self.table[mask] / p_ex[mask][:, None]
        return out

    def cond_y_given_x(self):
        p_x = self.p_x()
        p_xy = self.p_xy()
        out = np.zeros_like(p_xy)
        mask = p_x > 0
        out[mask] = p_xy[mask] / p_x[mask][:, None]
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["e", "x", "y", "p"])
            n_e, n_x, n_y = self.table.shape
            for e in range(n_e):
                for x in range(n_x):
                    for y in range(n_y):
                        writer.writerow([e, x, y, repr(float(self.table[e, x, y]))])

    @classmethod
    def from_csv(cls, path):
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["e", "x", "y", "p"]:
                raise ValueError("expected columns e, x, y, p")
            for record in reader:
                entries.append((int(record[0]), int(record[1]), int(record[2]), float(record[3])))
        shape = tuple(max(r[i] for r in entries) + 1 for i in range(3))
        table = np.zeros(shape)
        for e, x, y, p in entries:
            table[e, x, y] = p
        return cls(table)


def random_joint(seed, n_envs=3, n_inputs=4, n_labels=2, concentration=1.0):
    """Dirichlet-random joint over the full (e, x, y) support."""
    rng = stream(seed, "joint")
    flat = rng.dirichlet(np.full(n_envs * n_inputs * n_labels, concentration))
    # renormalize in float64 so the 1e-12 sum invariant holds exactly
    flat = flat / flat.sum()
    return DiscreteJoint(flat.reshape(n_envs, n_inputs, n_labels))


def random_predictor(seed, n_inputs, n_labels, concentration=1.0):
    rng = stream(seed, "predictor")
    return rng.dirichlet(np.full(n_labels, concentration), size=n_inputs)


def _kl_rows(p, q):
    """Row-wise KL(p || q) with the 0·log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    with np.errstate(divide="ignore"):
        # -inf only where q == 0 under positive p, which yields KL = +inf
        ratio = np.log(np.where(mask, p, 1.0)) - np.log(np.where(mask, q, 1.0))
    terms = np.where(mask, p * ratio, 0.0)
    return terms.sum(axis=-1)


def _check_predictor(predictor, n_inputs, n_labels):
    predictor = np.asarray(predictor, dtype=np.float64)
    if predictor.shape != (n_inputs, n_labels):
        raise ValueError(f"predictor must have shape {(n_inputs, n_labels)}")
    if np.any(predictor < 0) or np.any(np.abs(predictor.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("predictor rows must be distributions summing to 1")
    return predictor


@dataclass
class RiskReport:
    """Risk decomposition of one predictor against one joint.

    ``env_avg_risk = marginal_risk + irreducible`` always (the irreducible
    term does not depend on the predictor); when a representation map is
    supplied and the predictor factors through it,
    ``marginal_risk = representation_term + predictor_term``.
    """

    env_avg_risk: float
    marginal_risk: float
    irreducible: float
    representation_term: float = None
    predictor_term: float = None
    zero_mass_cells: int = 0


def risk_report(joint: DiscreteJoint, predictor, representation=None) -> RiskReport:
    """Exact enumeration of all risk terms for a q(y | x) predictor table."""
    n_e, n_x, n_y = joint.shape
    predictor = _check_predictor(predictor, n_x, n_y)
    p_ex = joint.p_ex()
    p_x = joint.p_x()
    cond_xe = joint.cond_y_given_xe()
    cond_x = joint.cond_y_given_x()

    env_avg = float(np.sum(p_ex * _kl_rows(cond_xe, predictor[None, :, :])))
    marginal = float(np.sum(p_x * _kl_rows(cond_x, predictor)))
    irreducible = float(np.sum(p_ex * _kl_rows(cond_xe, cond_x[None, :, :])))
    zero_cells = int(np.sum(p_ex == 0) + np.sum(p_x == 0))

    rep_term = pred_term = None
    if representation is not None:
        representation = np.asarray(representation, dtype=np.int64)
        cond_z = _cond_y_given_z(joint, representation)
        cond_zx = cond_z[representation]  # p(y | f(x)) indexed by x
        rep_term = float(np.sum(p_x * _kl_rows(cond_x, cond_zx)))
        pred_term = float(np.sum(p_x * _kl_rows(cond_zx, predictor)))
    return RiskReport(
        env_avg_risk=env_avg,
        marginal_risk=marginal,
        irreducible=irreducible,
        representation_term=rep_term,
        predictor_term=pred_term,
        zero_mass_cells=zero_cells,
    )


def _cond_y_given_z(joint, representation):
    n_z = int(representation.max()) + 1
    p_xy = joint.p_xy()
    p_zy = np.zeros((n_z, joint.shape[2]))
    np.add.at(p_zy, representation, p_xy)
    p_z = p_zy.sum(axis=1)
    out = np.zeros_like(p_zy)
    mask = p_z > 0
    out[mask] = p_zy[mask] / p_z[mask][:, None]
    return out


def check_excess_risk(joint, predictor, tol=1e-12):
    """Verify excess environment-average risk equals the marginal risk.

    The reference point is the environment-average risk of the true
    conditional p(y | x), which is the irreducible term. Returns
    (holds, deviation).
    """
    report = risk_report(joint, predictor)
    deviation = abs((report.env_avg_risk - report.irreducible) - report.marginal_risk)
    return bool(deviation <= tol), float(deviation)


# ---------------------------------------------------------------------------
# Conditional mutual information and the representation tradeoff


def conditional_mutual_information(p_abc) -> float:
    """I(A; B | C) of an exact joint table with axes (A, B, C)."""
    p = np.asarray(p_abc, dtype=np.float64)
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError("the joint table must sum to 1")
    p_c = p.sum(axis=(0, 1))
    p_ac = p.sum(axis=1)
    p_bc = p.sum(axis=0)
    mask = p > 0
    num = p * p_c[None, None, :]
    den = p_ac[:, None, :] * p_bc[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(mask, np.log(np.where(mask, num, 1.0)) - np.log(np.where(mask, den, 1.0)), 0.0)
    return float(np.sum(np.where(mask, p * logs, 0.0)))


def _mi_terms(joint: DiscreteJoint, representation):
    """All four conditional MI terms for one representation map."""
    f = np.asarray(representation, dtype=np.int64)
    n_e, n_x, n_y = joint.shape
    n_z = int(f.max()) + 1
    table = joint.table

    # I(y; x | f(x))
    p_yxz = np.zeros((n_y, n_x, n_z))
    p_xy = joint.p_xy()
    for x in range(n_x):
        p_yxz[:, x, f[x]] = p_xy[x]
    i_yx_f = conditional_mutual_information(p_yxz)

    # I(y; e | f(x))
    p_yez = np.zeros((n_y, n_e, n_z))
    for x in range(n_x):
        p_yez[:, :, f[x]] += table[:, x, :].T
    i_ye_f = conditional_mutual_information(p_yez)

    # I(y; x | e, f(x))
    p_yx_ez = np.zeros((n_y, n_x, n_e * n_z))
    for x in range(n_x):
        for e in range(n_e):
            p_yx_ez[:, x, e * n_z + f[x]] = table[e, x, :]
    i_yx_ef = conditional_mutual_information(p_yx_ez)

    # I(y; e | x)
    p_yex = np.transpose(table, (2, 0, 1))
    i_ye_x = conditional_mutual_information(p_yex)

    chain_dev = abs(i_yx_f - (i_ye_f + i_yx_ef - i_ye_x))
    return {
        "i_yx_given_f": i_yx_f,
        "i_ye_given_f": i_ye_f,
        "i_yx_given_ef": i_yx_ef,
        "i_ye_given_x": i_ye_x,
        "chain_deviation": chain_dev,
    }


def mi_tradeoff(joint: DiscreteJoint, f_ind, f_ri, tol=1e-12):
    """Tradeoff quantity between an invariance-seeking map and an intercept map.

    Returns (delta, breakdown). delta > 0 means the intercept-style map
    loses less predictive information: its representation risk term
    I(y; x | f(x)) is strictly smaller. The conditional-MI chain rule
    I(y;x|f) = I(y;e|f) + I(y;x|e,f) - I(y;e|x) is verified for both maps.
    """
    terms_ind = _mi_terms(joint, f_ind)
    terms_ri = _mi_terms(joint, f_ri)
    for name, terms in (("f_ind", terms_ind), ("f_ri", terms_ri)):
        if terms["chain_deviation"] > tol:
            raise ArithmeticError(
                f"chain-rule identity violated for {name}: "
                f"deviation {terms['chain_deviation']:.3e}"
            )
    delta = (terms_ind["i_yx_given_ef"] - terms_ri["i_yx_given_ef"]) - (
        terms_ri["i_ye_given_f"] - terms_ind["i_ye_given_f"]
    )
    return float(delta), {"f_ind": terms_ind, "f_ri": terms_ri}


# ---------------------------------------------------------------------------
# Representation search (tiny supports, exhaustive)


def all_partition_maps(n_inputs, max_outputs=None):
    """Canonical deterministic maps X -> Z, one per partition of X."""
    if n_inputs > 6:
        raise ValueError("exhaustive search is limited to |X| <= 6")
    limit = n_inputs if max_outputs is None else min(max_outputs, n_inputs)
    seen = set()
    maps = []
    for assignment in product(range(limit), repeat=n_inputs):
        canon, relabel = [], {}
        for v in assignment:
            if v not in relabel:
                relabel[v] = len(relabel)
            canon.append(relabel[v])
        key = tuple(canon)
        if key not in seen and len(relabel) <= limit:
            seen.add(key)
            maps.append(np.asarray(key, dtype=np.int64))
    return maps


def representation_risk(joint: DiscreteJoint, representation) -> float:
    """I(y; x | f(x)): the marginal risk of the best predictor through f."""
    f = np.asarray(representation, dtype=np.int64)
    cond_x = joint.cond_y_given_x()
    cond_zx = _cond_y_given_z(joint, f)[f]
    return float(np.sum(joint.p_x() * _kl_rows(cond_x, cond_zx)))


def zero_risk_maps(joint, tol=1e-12):
    """All canonical maps whose representation risk term is (numerically) zero."""
    return [f for f in all_partition_maps(joint.shape[1]) if representation_risk(joint, f) <= tol]


def is_coarsening(f_coarse, f_fine) -> bool:
    """True if f_coarse(x) is a deterministic function of f_fine(x)."""
    seen = {}
    for zf, zc in zip(f_fine, f_coarse):
        if zf in seen and seen[zf] != zc:
            return False
        seen[zf] = zc
    return True


def minimal_representation(maps):
    """The map recoverable from every other map in the set, if one exists."""
    for f in maps:
        if all(is_coarsening(f, g) for g in maps):
            return f
    return None


def invariance_gap(joint: DiscreteJoint, representation) -> float:
    """I(y; e | f(x)); zero iff y is independent of e given the representation."""
    return _mi_terms(joint, representation)["i_ye_given_f"]


def invariant_generative_joint(
    p_e, p_s_given_e, p_c_given_e, p_y_given_c, x_of=None
):
    """Joint p(e)p(s|e)p(c|e)p(x|s,c)p(y|c) with x a bijective coding of (s, c).

    The label depends on the causal coordinate only, so the map that reads
    c off x is invariant. Returns (DiscreteJoint, c_of_x array).
    """
    p_e = np.asarray(p_e, dtype=np.float64)
    p_s_given_e = np.asarray(p_s_given_e, dtype=np.float64)  # (E, S)
    p_c_given_e = np.asarray(p_c_given_e, dtype=np.float64)  # (E, C)
    p_y_given_c = np.asarray(p_y_given_c, dtype=np.float64)  # (C, Y)
    n_e, n_s = p_s_given_e.shape
    n_c = p_c_given_e.shape[1]
    n_y = p_y_given_c.shape[1]
    n_x = n_s * n_c
    table = np.zeros((n_e, n_x, n_y))
    c_of_x = np.zeros(n_x, dtype=np.int64)
    for s in range(n_s):
        for c in range(n_c):
            x = s * n_c + c if x_of is None else x_of(s, c)
            c_of_x[x] = c
            for e in range(n_e):
                table[e, x, :] = p_e[e] * p_s_given_e[e, s] * p_c_given_e[e, c] * p_y_given_c[c]
    return DiscreteJoint(table), c_of_x


# ---------------------------------------------------------------------------
# Closed-form reference risks for the tradeoff simulation


def posterior_variance(config: TradeoffConfig) -> float:
    """Var(e | c, s) for the jointly Gaussian (e, c, s)."""
    return 1.0 / (
        1.0 / config.sigma_e**2
        + 1.0 / config.sigma_c**2
        + config.alpha**2 / config.sigma_u**2
    )


def _posterior_mean(config, c, s):
    v = posterior_variance(config)
    return v * (c / config.sigma_c**2 + config.alpha * s / config.sigma_u**2)


def bayes_risk_well_specified(config: TradeoffConfig) -> float:
    """Optimal environment-average risk, well-specified regime (exact)."""
    v = posterior_variance(config)
    return 0.5 * float(np.log1p(config.alpha**2 * v / config.sigma_eps**2))


def bayes_risk_misspecified(config: TradeoffConfig, quad_order=128) -> float:
    """Optimal environment-average risk, misspecified regime.

    One-dimensional expectation over the causal marginal
    c ~ N(0, sigma_e² + sigma_c²), evaluated by Gauss-Hermite quadrature.
    """
    v = posterior_variance(config)
    t, w = np.polynomial.hermite.hermgauss(quad_order)
    c = np.sqrt(2.0 * (config.sigma_e**2 + config.sigma_c**2)) * t
    k = config.alpha + (1.0 - config.alpha) * c
    vals = 0.5 * np.log1p(k**2 * v / config.sigma_eps**2)
    return float(np.sum(w * vals) / np.sqrt(np.pi))


def _effect_multiplier(config, c):
    if config.regime == "well-specified":
        return np.full_like(np.asarray(c, dtype=np.float64), config.alpha)
    return config.alpha + (1.0 - config.alpha) * np.asarray(c, dtype=np.float64)


def monte_carlo_bayes_risk(config: TradeoffConfig, n_draws=10**6, seed=0):
    """Monte-Carlo estimate of the optimal risk; independent of the closed forms.

    Draws (e, c, s) from the generator law and averages the pointwise
    Gaussian KL between p(y | x, e) and p(y | x). Returns (estimate, se).
    """
    rng = stream(seed, "mc-bayes")
    e = config.sigma_e * rng.standard_normal(n_draws)
    c = e + config.sigma_c * rng.standard_normal(n_draws)
    s = config.alpha * e + config.sigma_u * rng.standard_normal(n_draws)
    v = posterior_variance(config)
    k = _effect_multiplier(config, c)
    m = _posterior_mean(config, c, s)
    v1 = config.sigma_eps**2
    v2 = v1 + k**2 * v
    kl = 0.5 * (np.log(v2 / v1) + (v1 + k**2 * (e - m) ** 2) / v2 - 1.0)
    return float(kl.mean()), float(kl.std(ddof=1) / np.sqrt(n_draws))


def marginal_oracle(config: TradeoffConfig):
    """The true marginal predictive p(y | x) as a (mean, variance) callable."""

    def predict_dist(X):
        c, s = X[:, 0], X[:, 1]
        v = posterior_variance(config)
        k = _effect_multiplier(config, c)
        mean = c + k * _posterior_mean(config, c, s)
        return mean, config.sigma_eps**2 + k**2 * v

    return predict_dist


def conditional_oracle(config: TradeoffConfig):
    """The environment-specific conditional p(y | x, e); diagnostic use only."""

    def predict_dist(X, env_effect):
        c = X[:, 0]
        k = _effect_multiplier(config, c)
        mean = c + k * env_effect
        return mean, np.full_like(mean, config.sigma_eps**2)

    return predict_dist


# ---------------------------------------------------------------------------
# Colored-mechanism reference accuracy


def bayes_accuracy_colored(config: ColoredConfig) -> float:
    """Exact accuracy of the best label rule that observes (parity, color)."""
    cells = colored_cell_probs(config.a, config.b, config.r)
    acc = 0.0
    for (d, c), p1 in cells.items():
        p_c1 = P_COLOR_GIVEN_EVEN if d == 0 else P_COLOR_GIVEN_ODD
        p_cell = 0.5 * (p_c1 if c == 1 else 1.0 - p_c1)
        acc += p_cell * max(p1, 1.0 - p1)
    return float(acc)
