"""Ground-truth oracles: closed-form risks, decomposition identities, MI search."""

import numpy as np
import pytest

from envmix.datasets import ColoredConfig, TradeoffConfig
from envmix.exact import (
    DiscreteJoint,
    all_partition_maps,
    bayes_accuracy_colored,
    bayes_risk_misspecified,
    bayes_risk_well_specified,
    check_excess_risk,
    conditional_mutual_information,
    invariance_gap,
    invariant_generative_joint,
    is_coarsening,
    marginal_oracle,
    minimal_representation,
    mi_tradeoff,
    monte_carlo_bayes_risk,
    posterior_variance,
    random_joint,
    random_predictor,
    representation_risk,
    risk_report,
    zero_risk_maps,
)
from envmix.rng import stream

# 128-node quadrature oracle for the misspecified formula at alpha = 0,
# default unit scales (frozen; cross-checked below by Monte Carlo)
MISSPEC_ALPHA0 = 0.2667265899490711


class TestWellSpecifiedRisk:
    def test_zero_at_alpha_zero(self):
        assert bayes_risk_well_specified(TradeoffConfig(alpha=0.0)) == 0.0

    def test_alpha_one_unit_scales(self):
        """V = 1/3 and risk = log(4/3)/2, cross-checked by Monte-Carlo KL."""
        cfg = TradeoffConfig(alpha=1.0)
        assert posterior_variance(cfg) == pytest.approx(1.0 / 3.0, abs=1e-15)
        closed = bayes_risk_well_specified(cfg)
        assert closed == pytest.approx(0.5 * np.log(4.0 / 3.0), abs=1e-15)
        mc, se = monte_carlo_bayes_risk(cfg, n_draws=10**6, seed=1)
        assert abs(mc - closed) < 3 * se

    def test_strictly_increasing_in_alpha(self):
        grid = np.linspace(0.0, 1.0, 21)
        risks = [bayes_risk_well_specified(TradeoffConfig(alpha=a)) for a in grid]
        assert all(b > a for a, b in zip(risks, risks[1:]))


class TestMisspecifiedRisk:
    def test_alpha_one_matches_well_specified(self):
        """At α = 1 the interaction vanishes and both formulas coincide."""
        mis = TradeoffConfig(alpha=1.0, regime="misspecified")
        well = TradeoffConfig(alpha=1.0)
        assert bayes_risk_misspecified(mis) == pytest.approx(
            bayes_risk_well_specified(well), abs=1e-12
        )

    def test_noise_dominates(self):
        cfg = TradeoffConfig(alpha=0.5, regime="misspecified", sigma_eps=1e6)
        assert bayes_risk_misspecified(cfg) == pytest.approx(0.0, abs=1e-9)

    def test_alpha_zero_two_oracle_agreement(self):
        """Quadrature value (frozen) and 10⁶-draw Monte-Carlo agree within 3 s.e."""
        cfg = TradeoffConfig(alpha=0.0, regime="misspecified")
        quad = bayes_risk_misspecified(cfg)
        assert quad == pytest.approx(MISSPEC_ALPHA0, abs=1e-12)
        mc, se = monte_carlo_bayes_risk(cfg, n_draws=10**6, seed=2)
        assert abs(mc - quad) < 3 * se


class TestColoredAccuracy:
    def test_no_color_effect(self):
        assert bayes_accuracy_colored(ColoredConfig(r=0.0)) == pytest.approx(0.75, abs=1e-15)

    def test_reference_effect(self):
        """Four-cell enumeration with the 5/8, 3/8 coupling gives 0.7875."""
        assert bayes_accuracy_colored(ColoredConfig(r=0.15)) == pytest.approx(
            0.7875, abs=1e-15
        )

    def test_matches_brute_force_enumeration(self):
        """Second route: explicit loop over the four cells, both signs of r.

        The asymmetric color-parity coupling (5/8 vs 3/8) makes the value
        asymmetric in r: at r = -0.15 the heavily weighted cells are the
        low-confidence ones and the optimum drops to 0.7125.
        """
        for r in (0.20, 0.15, 0.05, 0.0, -0.05, -0.15, -0.20):
            cfg = ColoredConfig(r=r)
            brute = 0.0
            for d, p_c1 in ((0, 5 / 8), (1, 3 / 8)):
                for c in (0, 1):
                    base = cfg.a if d == 0 else cfg.b
                    p1 = base + r if c == 1 else base - r
                    brute += 0.5 * (p_c1 if c == 1 else 1 - p_c1) * max(p1, 1 - p1)
            assert bayes_accuracy_colored(cfg) == pytest.approx(brute, abs=1e-15)
        assert bayes_accuracy_colored(ColoredConfig(r=-0.15)) == pytest.approx(
            0.7125, abs=1e-15
        )

    def test_symmetric_coupling_restores_sign_symmetry(self):
        """With p(c=1|d) = 1/2 in both rows, accuracy(r) = accuracy(-r)."""
        for r in (0.05, 0.15, 0.20):
            forward = 0.25 * sum(
                max(p, 1 - p) for p in (0.75 + r, 0.75 - r, 0.25 + r, 0.25 - r)
            )
            backward = 0.25 * sum(
                max(p, 1 - p) for p in (0.75 - r, 0.75 + r, 0.25 - r, 0.25 + r)
            )
            assert forward == pytest.approx(backward, abs=1e-15)


class TestRiskReport:
    def test_true_marginal_conditional_is_optimal(self):
        """q = p(y | x) has zero marginal risk; env-average equals irreducible."""
        joint = random_joint(41)
        report = risk_report(joint, joint.cond_y_given_x())
        assert report.marginal_risk == pytest.approx(0.0, abs=1e-14)
        assert report.env_avg_risk == pytest.approx(report.irreducible, abs=1e-14)

    def test_conditionally_independent_env_has_zero_gap(self):
        """y ⊥ e | x makes the irreducible term vanish."""
        rng = stream(42, "indep")
        p_ex = rng.dirichlet(np.ones(12)).reshape(3, 4)
        p_y_given_x = rng.dirichlet(np.ones(2), size=4)
        table = p_ex[:, :, None] * p_y_given_x[None, :, :]
        joint = DiscreteJoint(table / table.sum())
        report = risk_report(joint, random_predictor(1, 4, 2))
        assert report.irreducible == pytest.approx(0.0, abs=1e-14)

    def test_identity_representation_loses_nothing(self):
        joint = random_joint(43)
        report = risk_report(
            joint, random_predictor(2, 4, 2), representation=np.arange(4)
        )
        assert report.representation_term == pytest.approx(0.0, abs=1e-14)

    def test_additivity_on_random_joints(self):
        """Lemma-style split env_avg = marginal + irreducible on 100 joints."""
        rng = stream(44, "suite")
        for _ in range(100):
            joint = random_joint(int(rng.integers(2**31)))
            q = random_predictor(int(rng.integers(2**31)), 4, 2)
            report = risk_report(joint, q)
            assert abs(
                report.env_avg_risk - report.marginal_risk - report.irreducible
            ) < 1e-12

    def test_irreducible_term_is_predictor_free(self):
        """Over 50 random predictors the gap env_avg - marginal is constant."""
        joint = random_joint(45)
        gaps = []
        for k in range(50):
            report = risk_report(joint, random_predictor(100 + k, 4, 2))
            gaps.append(report.env_avg_risk - report.marginal_risk)
        assert max(gaps) - min(gaps) < 1e-10

    def test_marginal_split_for_factoring_predictors(self):
        """marginal = representation term + predictor term when q factors through f."""
        rng = stream(46, "factor")
        f = np.asarray([0, 1, 0, 1])
        for _ in range(50):
            joint = random_joint(int(rng.integers(2**31)))
            q_z = random_predictor(int(rng.integers(2**31)), 2, 2)
            report = risk_report(joint, q_z[f], representation=f)
            assert abs(
                report.marginal_risk
                - report.representation_term
                - report.predictor_term
            ) < 1e-12

    def test_zero_mass_cells_are_recorded(self):
        table = random_joint(47).table.copy()
        table[:, 2, :] = 0.0
        table /= table.sum()
        joint = DiscreteJoint(table)
        report = risk_report(joint, random_predictor(3, 4, 2))
        assert report.zero_mass_cells == 3 + 1  # three (e,x) cells and one x cell
        assert np.isfinite(report.env_avg_risk)

    def test_predictor_validation(self):
        joint = random_joint(48)
        bad = np.full((4, 2), 0.7)
        with pytest.raises(ValueError, match="sum"):
            risk_report(joint, bad)


class TestExcessRisk:
    def test_true_conditional_has_zero_excess(self):
        joint = random_joint(51)
        holds, dev = check_excess_risk(joint, joint.cond_y_given_x())
        assert holds and dev < 1e-14

    def test_uniform_predictor_excess_equals_marginal_kl(self):
        joint = random_joint(52)
        uniform = np.full((4, 2), 0.5)
        report = risk_report(joint, uniform)
        assert (report.env_avg_risk - report.irreducible) == pytest.approx(
            report.marginal_risk, abs=1e-13
        )

    def test_identity_on_random_suite(self):
        """ε-robustness bookkeeping: env-average and marginal gaps coincide."""
        rng = stream(53, "excess")
        for _ in range(100):
            joint = random_joint(int(rng.integers(2**31)))
            q = random_predictor(int(rng.integers(2**31)), 4, 2)
            holds, dev = check_excess_risk(joint, q)
            assert holds, f"deviation {dev}"

    def test_family_gap_bookkeeping(self):
        """Over a finite predictor family, argmin and gaps match in both risks."""
        joint = random_joint(54)
        family = [random_predictor(200 + k, 4, 2) for k in range(20)]
        env_risks = np.array([risk_report(joint, q).env_avg_risk for q in family])
        marg_risks = np.array([risk_report(joint, q).marginal_risk for q in family])
        gaps_env = env_risks - env_risks.min()
        gaps_marg = marg_risks - marg_risks.min()
        np.testing.assert_allclose(gaps_env, gaps_marg, atol=1e-12)


class TestMutualInformation:
    def test_chain_rule_on_random_joints(self):
        """I(y;x|f) = I(y;e|f) + I(y;x|e,f) - I(y;e|x) on 100 random joints."""
        rng = stream(61, "chain")
        maps = [np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]), np.array([0, 0, 0, 0])]
        for _ in range(100):
            joint = random_joint(int(rng.integers(2**31)))
            delta, breakdown = mi_tradeoff(joint, maps[0], maps[1])
            assert breakdown["f_ind"]["chain_deviation"] < 1e-12
            assert breakdown["f_ri"]["chain_deviation"] < 1e-12

    def test_equal_maps_give_zero_delta(self):
        joint = random_joint(62)
        f = np.array([0, 1, 0, 1])
        delta, _ = mi_tradeoff(joint, f, f)
        assert delta == pytest.approx(0.0, abs=1e-15)

    def test_conditional_independence_reduces_identity(self):
        """With y ⊥ e | x the chain rule loses its I(y;e|x) term."""
        rng = stream(63, "ci")
        p_ex = rng.dirichlet(np.ones(12)).reshape(3, 4)
        p_y_given_x = rng.dirichlet(np.ones(2), size=4)
        table = p_ex[:, :, None] * p_y_given_x[None, :, :]
        joint = DiscreteJoint(table / table.sum())
        _, breakdown = mi_tradeoff(joint, np.array([0, 0, 1, 1]), np.array([0, 1, 1, 0]))
        for terms in breakdown.values():
            assert terms["i_ye_given_x"] == pytest.approx(0.0, abs=1e-13)
            assert abs(
                terms["i_yx_given_f"]
                - terms["i_ye_given_f"]
                - terms["i_yx_given_ef"]
            ) < 1e-12

    def test_intercept_style_representation_wins(self):
        """A joint where e shifts p(y | x, e) and one input coordinate proxies e.

        Discarding the proxy coordinate (the invariance-seeking choice)
        loses predictive information, so delta > 0. The representation term
        is also computed by the direct KL definition as a second route.
        """
        # x = 2*x1 + x2; x1 predictive, x2 a proxy for e; y depends on (x1, e)
        p_y1 = np.array([[0.2, 0.5], [0.5, 0.8]])  # rows x1, cols e
        p_x2_given_e = np.array([0.2, 0.8])
        table = np.zeros((2, 4, 2))
        for e in range(2):
            for x1 in range(2):
                for x2 in range(2):
                    p_x = 0.5 * (p_x2_given_e[e] if x2 == 1 else 1 - p_x2_given_e[e])
                    p = 0.5 * p_x
                    x = 2 * x1 + x2
                    table[e, x, 1] = p * p_y1[x1, e]
                    table[e, x, 0] = p * (1 - p_y1[x1, e])
        joint = DiscreteJoint(table / table.sum())
        f_ind = np.array([0, 0, 1, 1])  # keeps x1, discards the e-linked x2
        f_ri = np.array([0, 1, 2, 3])  # identity
        delta, breakdown = mi_tradeoff(joint, f_ind, f_ri)
        assert delta > 1e-3
        # second route: delta equals the difference of representation risks
        direct = representation_risk(joint, f_ind) - representation_risk(joint, f_ri)
        assert delta == pytest.approx(direct, abs=1e-12)

    def test_cmi_validates_normalization(self):
        with pytest.raises(ValueError, match="sum"):
            conditional_mutual_information(np.ones((2, 2, 2)))


class TestMinimalRepresentation:
    def test_partition_enumeration_counts(self):
        # Bell numbers: 1, 2, 5, 15, 52, 203
        for n, bell in ((1, 1), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203)):
            assert len(all_partition_maps(n)) == bell

    def test_coarsening_detection(self):
        assert is_coarsening(np.array([0, 0, 0]), np.array([0, 1, 1]))
        assert not is_coarsening(np.array([0, 1, 0]), np.array([0, 0, 1]))

    def test_minimal_zero_risk_map_is_invariant(self):
        """On invariant generative models the minimal zero-risk map drops e.

        The model p(e)p(s|e)p(c|e)p(x|s,c)p(y|c) with x a bijective coding
        of (s, c) admits the c-reading map as an invariant representation;
        the minimal map found by exhaustive search must satisfy
        y ⊥ e | f(x) exactly.
        """
        rng = stream(71, "prop3")
        for trial in range(10):
            p_e = rng.dirichlet([2.0, 2.0])
            p_s = rng.dirichlet([2.0, 2.0], size=2)
            p_c = rng.dirichlet([2.0, 2.0], size=2)
            p_y = np.array([[0.85, 0.15], [0.3, 0.7]])
            joint, c_of_x = invariant_generative_joint(p_e, p_s, p_c, p_y)
            candidates = zero_risk_maps(joint, tol=1e-10)
            minimal = minimal_representation(candidates)
            assert minimal is not None
            assert invariance_gap(joint, minimal) < 1e-12
            # the minimal map reads exactly the causal coordinate
            assert is_coarsening(minimal, c_of_x) and is_coarsening(c_of_x, minimal)

    def test_identity_map_always_zero_risk(self):
        joint = random_joint(72)
        assert representation_risk(joint, np.arange(4)) == pytest.approx(0.0, abs=1e-14)


class TestDiscreteJointIO:
    def test_csv_roundtrip(self, tmp_path):
        joint = random_joint(81)
        path = tmp_path / "joint.csv"
        joint.to_csv(path)
        back = DiscreteJoint.from_csv(path)
        np.testing.assert_array_equal(back.table, joint.table)

    def test_validation(self):
        with pytest.raises(ValueError, match="sums"):
            DiscreteJoint(np.ones((2, 2, 2)))
        with pytest.raises(ValueError, match="nonnegative"):
            table = np.full((2, 2, 2), 0.125)
            table[0, 0, 0] = -0.1
            table[0, 0, 1] = 0.35
            DiscreteJoint(table)
