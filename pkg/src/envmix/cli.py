"""Experiment runner: tradeoff and colored benchmarks, identity suite, fit/eval.

Config files are plain ``key = value`` text (``#`` comments allowed); keys
mirror the long option names with dashes or underscores. Precedence is
command line > config file > built-in default. The environment variable
``ENVMIX_OUTDIR`` sets the default output directory.

Every output row carries (seed, config_hash, version) so runs can be traced
back to their exact configuration.
"""

from __future__ import annotations

import csv
import hashlib
import os
import sys
from pathlib import Path

import click
import numpy as np

import envmix
from envmix.datasets import (
    ColoredConfig,
    EnvDataset,
    TradeoffConfig,
    generate_colored,
    generate_tradeoff,
    load_digit_pool,
)
from envmix.estimators import (
    EnvPenaltyClassifier,
    EnvPenaltyRegressor,
    FitDivergenceError,
    RandomInterceptClassifier,
    RandomInterceptRegressor,
    load_estimator,
)
from envmix.exact import (
    bayes_accuracy_colored,
    bayes_risk_misspecified,
    bayes_risk_well_specified,
    invariant_generative_joint,
    invariance_gap,
    minimal_representation,
    mi_tradeoff,
    random_joint,
    random_predictor,
    risk_report,
    zero_risk_maps,
)
from envmix.metrics import estimate_env_avg_risk, report_binary
from envmix.rng import stream

DEFAULT_OUTDIR_VAR = "ENVMIX_OUTDIR"


def _outdir(value):
    path = Path(value or os.environ.get(DEFAULT_OUTDIR_VAR, "runs"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_config(path):
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.ClickException(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(ctx, params):
    """Fill params from a config file where the command line did not set them."""
    if not params.get("config"):
        return params
    overrides = _read_config(params["config"])
    for key, raw in overrides.items():
        if key not in params:
            raise click.ClickException(f"unknown config key '{key}'")
        source = ctx.get_parameter_source(key)
        if source is not None and source.name == "COMMANDLINE":
            continue
        current = params[key]
        if isinstance(current, bool):
            params[key] = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            params[key] = int(raw)
        elif isinstance(current, float):
            params[key] = float(raw)
        else:
            params[key] = raw
    return params


def _config_hash(params):
    text = ";".join(f"{k}={params[k]}" for k in sorted(params))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _parse_floats(text):
    return [float(v) for v in str(text).split(",") if v != ""]


def _parse_methods(text):
    methods = [m.strip() for m in str(text).split(",") if m.strip()]
    known = {"ri", "erm", "irm", "vrex"}
    unknown = set(methods) - known
    if unknown:
        raise click.ClickException(f"unknown methods: {sorted(unknown)}")
    return methods


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@click.group()
@click.version_option(envmix.__version__)
def main():
    """Multi-environment prediction experiments."""


# ---------------------------------------------------------------------------
# tradeoff


def _tradeoff_estimator(method, lam_irm, lam_vrex, epochs, lr, n_envs, obs_batch, seed):
    # mirror observation-level batches: all environments per step, with
    # obs_batch observations split evenly across them
    block = max(1, int(obs_batch) // int(n_envs))
    common = dict(
        hidden_layer_sizes=(32, 32),
        learning_rate=lr,
        epochs=epochs,
        env_batch_size=n_envs,
        block_size=block,
        random_state=seed,
    )
    if method == "ri":
        return RandomInterceptRegressor(rule="closed-form", **common)
    lam = {"erm": 0.0, "irm": lam_irm, "vrex": lam_vrex}[method]
    return EnvPenaltyRegressor(method=method, penalty_weight=lam, **common)


@main.command()
@click.option("--regime", default="both",
              type=click.Choice(["both", "well-specified", "misspecified"]))
@click.option("--alphas", default="0,0.25,0.5,0.75,1")
@click.option("--methods", default="ri,erm,irm,vrex")
@click.option("--n-envs", default=20, show_default=True)
@click.option("--n-per-env", default=500, show_default=True)
@click.option("--n-test-envs", default=20, show_default=True)
@click.option("--reps", default=3, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=1e-2, show_default=True)
@click.option("--obs-batch", default=100, show_default=True,
              help="observations per step, split across all environments")
@click.option("--penalty-irm", default=0.01, show_default=True)
@click.option("--penalty-vrex", default=0.01, show_default=True)
@click.option("--full-scale", is_flag=True,
              help="50 envs x 1000 obs with 10 repetitions.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None, help="output directory")
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def tradeoff(ctx, **params):
    """Environment-average risk of every method across the alpha grid."""
    params = _apply_config(ctx, params)
    if params["full_scale"]:
        params.update(n_envs=50, n_per_env=1000, n_test_envs=50, reps=10)
    out = _outdir(params["out"])
    tag = _config_hash(params)
    regimes = (
        ["well-specified", "misspecified"]
        if params["regime"] == "both"
        else [params["regime"]]
    )
    methods = _parse_methods(params["methods"])
    alphas = _parse_floats(params["alphas"])
    rows = []
    for regime in regimes:
        for alpha in alphas:
            base = TradeoffConfig(
                alpha=alpha, regime=regime,
                n_envs=params["n_envs"], n_per_env=params["n_per_env"],
            )
            bayes = (
                bayes_risk_well_specified(base)
                if regime == "well-specified"
                else bayes_risk_misspecified(base)
            )
            for rep in range(params["reps"]):
                data_seed = int(stream(params["seed"], regime, repr(alpha), rep).integers(2**31))
                train, _ = generate_tradeoff(base.with_seed(data_seed))
                X, y, envs = train.stacked()
                for method in methods:
                    est = _tradeoff_estimator(
                        method, params["penalty_irm"], params["penalty_vrex"],
                        params["epochs"], params["lr"],
                        params["n_envs"], params["obs_batch"],
                        seed=data_seed + 1,
                    )
                    try:
                        est.fit(X, y, envs)
                    except FitDivergenceError as err:
                        click.echo(f"[diverged] {regime} alpha={alpha} {method}: {err}",
                                   err=True)
                        rows.append([regime, alpha, method, rep, "", "", "diverged",
                                     params["seed"], tag, envmix.__version__])
                        continue
                    _write_trace(out, f"{regime}-a{alpha}-{method}-rep{rep}", est.loss_trace_)
                    risk, se = estimate_env_avg_risk(
                        est.predict_dist, base,
                        n_envs=params["n_test_envs"], n_per_env=params["n_per_env"],
                        seed=data_seed + 2,
                    )
                    rows.append([regime, alpha, method, rep, repr(risk), repr(se), "ok",
                                 params["seed"], tag, envmix.__version__])
                rows.append([regime, alpha, "bayes", rep, repr(bayes), repr(0.0), "ok",
                             params["seed"], tag, envmix.__version__])
    path = out / "tradeoff.csv"
    _write_rows(path, ["regime", "alpha", "method", "rep", "env_avg_risk", "stderr",
                       "status", "seed", "config_hash", "version"], rows)
    click.echo(f"wrote {path}")


def _write_trace(out, name, trace):
    with open(out / f"loss-{name}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(trace):
            writer.writerow([i, repr(value)])


# ---------------------------------------------------------------------------
# colored


def _colored_estimator(method, lam_irm, lam_vrex, epochs, lr, batch, seed):
    common = dict(
        hidden_layer_sizes=(32, 32),
        learning_rate=lr,
        epochs=epochs,
        env_batch_size=batch,
        random_state=seed,
    )
    if method == "ri":
        return RandomInterceptClassifier(rule="grid", grid_half_width=10.0,
                                         grid_steps=32, **common)
    lam = {"erm": 0.0, "irm": lam_irm, "vrex": lam_vrex}[method]
    return EnvPenaltyClassifier(method=method, penalty_weight=lam, **common)


@main.command()
@click.option("--train-rs", default="0.10,0.15,0.20")
@click.option("--test-rs", default="0.15,-0.10,-0.15,-0.20,0")
@click.option("--a", default=0.75, show_default=True)
@click.option("--b", default=0.25, show_default=True)
@click.option("--n-per-env", default=2000, show_default=True)
@click.option("--methods", default="ri,erm,irm,vrex")
@click.option("--epochs", default=60, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--env-batch", default=3, show_default=True)
@click.option("--penalty-irm", default=20.0, show_default=True)
@click.option("--penalty-vrex", default=100.0, show_default=True)
@click.option("--reps", default=5, show_default=True)
@click.option("--mode", default="tabular", type=click.Choice(["tabular", "images"]))
@click.option("--images", default=None, type=click.Path(exists=True),
              help="IDX image file for --mode images")
@click.option("--labels", default=None, type=click.Path(exists=True),
              help="IDX label file for --mode images")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def colored(ctx, **params):
    """Accuracy gap to the exact best predictor across colored environments."""
    params = _apply_config(ctx, params)
    out = _outdir(params["out"])
    tag = _config_hash(params)
    methods = _parse_methods(params["methods"])
    train_rs = _parse_floats(params["train_rs"])
    test_rs = _parse_floats(params["test_rs"])
    pool = None
    if params["mode"] == "images":
        if not (params["images"] and params["labels"]):
            raise click.ClickException("--mode images requires --images and --labels")
        pool = load_digit_pool(params["images"], params["labels"])

    def env_config(r, seed):
        return ColoredConfig(
            r=r, a=params["a"], b=params["b"], n_per_env=params["n_per_env"],
            mode=params["mode"], image_pool=pool, seed=seed,
        )

    rows = []
    for rep in range(params["reps"]):
        rep_seed = int(stream(params["seed"], "colored-rep", rep).integers(2**31))
        train = EnvDataset.concat(
            [generate_colored(env_config(r, rep_seed)) for r in train_rs]
        )
        X, y, envs = train.stacked()
        tests = {
            r: generate_colored(env_config(r, rep_seed + 1), env_id=f"test r={r:+.2f}")
            for r in test_rs
        }
        for method in methods:
            est = _colored_estimator(
                method, params["penalty_irm"], params["penalty_vrex"],
                params["epochs"], params["lr"], params["env_batch"],
                seed=rep_seed + 2,
            )
            try:
                est.fit(X, y, envs)
            except FitDivergenceError as err:
                click.echo(f"[diverged] colored {method}: {err}", err=True)
                for r in test_rs:
                    rows.append([r, method, rep, "", "", "", "", "", "", "diverged",
                                 params["seed"], tag, envmix.__version__])
                continue
            _write_trace(out, f"colored-{method}-rep{rep}", est.loss_trace_)
            for r, test_set in tests.items():
                bayes_acc = bayes_accuracy_colored(env_config(r, 0))
                report = report_binary(lambda Z: est.predict_proba(Z)[:, 1], test_set)
                pooled = report.pooled
                rows.append([
                    r, method, rep,
                    repr(pooled["accuracy"]), repr(bayes_acc - pooled["accuracy"]),
                    repr(bayes_acc), repr(pooled["nll"]), repr(pooled["brier"]),
                    repr(pooled["ece"]), "ok",
                    params["seed"], tag, envmix.__version__,
                ])
    path = out / "colored.csv"
    _write_rows(path, ["test_env_r", "method", "rep", "accuracy", "accuracy_gap",
                       "bayes_accuracy", "nll", "brier", "ece", "status",
                       "seed", "config_hash", "version"], rows)
    click.echo(f"wrote {path}")


# ---------------------------------------------------------------------------
# identities


@main.command()
@click.option("--n-joints", default=100, show_default=True)
@click.option("--tol", default=1e-10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default=None)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def identities(ctx, **params):
    """Verify the exact risk identities on randomized discrete joints."""
    params = _apply_config(ctx, params)
    out = _outdir(params["out"])
    tol = params["tol"]
    worst = {
        "lemma1_additivity": 0.0,
        "prop2_decomposition": 0.0,
        "corollary1_excess": 0.0,
        "chain_rule": 0.0,
        "prop3_minimal_invariance": 0.0,
    }
    failed = None
    rng = stream(params["seed"], "identity-suite")
    for i in range(params["n_joints"]):
        joint_seed = int(rng.integers(2**31))
        joint = random_joint(joint_seed, n_envs=3, n_inputs=4, n_labels=2)
        q = random_predictor(joint_seed + 1, 4, 2)
        f = np.asarray([0, 0, 1, 1])

        report = risk_report(joint, q, representation=f)
        worst["lemma1_additivity"] = max(
            worst["lemma1_additivity"],
            abs(report.env_avg_risk - report.marginal_risk - report.irreducible),
        )
        # predictor that factors through f, for the marginal-risk split
        q_z = random_predictor(joint_seed + 2, 2, 2)
        factored = risk_report(joint, q_z[f], representation=f)
        worst["prop2_decomposition"] = max(
            worst["prop2_decomposition"],
            abs(factored.marginal_risk - factored.representation_term
                - factored.predictor_term),
        )
        worst["corollary1_excess"] = max(
            worst["corollary1_excess"],
            abs((report.env_avg_risk - report.irreducible) - report.marginal_risk),
        )
        _, breakdown = mi_tradeoff(joint, f, np.asarray([0, 1, 0, 1]), tol=1.0)
        worst["chain_rule"] = max(
            worst["chain_rule"],
            breakdown["f_ind"]["chain_deviation"],
            breakdown["f_ri"]["chain_deviation"],
        )
        if max(worst.values()) > tol and failed is None:
            failed = joint
            joint.to_csv(out / "violating-joint.csv")

    # structural check: on invariant generative models, the minimal
    # zero-risk representation is conditionally independent of e
    for k in range(5):
        gen_rng = stream(params["seed"], "identity-invariant", k)
        p_e = gen_rng.dirichlet([2.0, 2.0])
        p_s = gen_rng.dirichlet([2.0, 2.0], size=2)
        p_c = gen_rng.dirichlet([2.0, 2.0], size=2)
        p_y = np.stack([[0.8, 0.2], [0.3, 0.7]])
        joint, _ = invariant_generative_joint(p_e, p_s, p_c, p_y)
        minimal = minimal_representation(zero_risk_maps(joint, tol=1e-9))
        gap = invariance_gap(joint, minimal) if minimal is not None else np.inf
        worst["prop3_minimal_invariance"] = max(worst["prop3_minimal_invariance"], gap)

    click.echo(f"{'identity':<28}{'max deviation':>16}{'tolerance':>12}  status")
    ok = True
    for name, dev in worst.items():
        passed = dev <= tol
        ok = ok and passed
        click.echo(f"{name:<28}{dev:>16.3e}{tol:>12.0e}  {'pass' if passed else 'FAIL'}")
    if not ok:
        click.echo("violating joint exported" if failed is not None else "", err=True)
        sys.exit(1)


# ---------------------------------------------------------------------------
# fit / eval


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True),
              help="dataset CSV with columns env_id, features..., y")
@click.option("--model", default="ri", type=click.Choice(["ri", "erm", "irm", "vrex"]))
@click.option("--family", default="gaussian", type=click.Choice(["gaussian", "bernoulli"]))
@click.option("--penalty", default=0.0, show_default=True)
@click.option("--hidden", default="32,32", show_default=True)
@click.option("--rule", default="auto", show_default=True)
@click.option("--quad-order", default=32, show_default=True)
@click.option("--epochs", default=20, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--env-batch", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(),
              help="checkpoint file to write")
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def fit(ctx, **params):
    """Fit one model on a dataset CSV and write a checkpoint."""
    params = _apply_config(ctx, params)
    dataset = EnvDataset.from_csv(params["data"])
    X, y, envs = dataset.stacked()
    hidden = tuple(int(h) for h in params["hidden"].split(","))
    common = dict(
        hidden_layer_sizes=hidden,
        learning_rate=params["lr"],
        epochs=params["epochs"],
        env_batch_size=params["env_batch"],
        random_state=params["seed"],
    )
    binary = params["family"] == "bernoulli"
    if params["model"] == "ri":
        cls = RandomInterceptClassifier if binary else RandomInterceptRegressor
        est = cls(rule=params["rule"], quad_order=params["quad_order"], **common)
    else:
        cls = EnvPenaltyClassifier if binary else EnvPenaltyRegressor
        est = cls(method=params["model"], penalty_weight=params["penalty"], **common)
    est.fit(X, y, envs)
    est.save(params["out"])
    trace_path = Path(params["out"]).with_suffix(".loss.csv")
    with open(trace_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(est.loss_trace_):
            writer.writerow([i, repr(value)])
    click.echo(f"wrote {params['out']} (final loss {est.loss_trace_[-1]:.6f})")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True))
@click.pass_context
def eval_cmd(ctx, **params):
    """Evaluate a checkpoint on a dataset CSV; writes metric rows."""
    params = _apply_config(ctx, params)
    est = load_estimator(params["model_path"])
    dataset = EnvDataset.from_csv(params["data"])
    rows = []
    if hasattr(est, "predict_proba"):
        report = report_binary(lambda Z: est.predict_proba(Z)[:, 1], dataset)
        rows = report.rows(type(est).__name__, params["seed"])
    else:
        for env_id, (X, y) in zip(dataset.env_ids, dataset.blocks):
            mean, var = est.predict_dist(X)
            nll = float(np.mean(0.5 * np.log(2 * np.pi * var) + (y - mean) ** 2 / (2 * var)))
            rmse = float(np.sqrt(np.mean((y - mean) ** 2)))
            rows.append((type(est).__name__, env_id, "nll", nll, "", params["seed"]))
            rows.append((type(est).__name__, env_id, "rmse", rmse, "", params["seed"]))
    _write_rows(params["out"], ["method", "env_id", "metric", "value", "stderr", "seed"],
                [[r[0], r[1], r[2], repr(r[3]) if isinstance(r[3], float) else r[3], r[4], r[5]]
                 for r in rows])
    click.echo(f"wrote {params['out']}")


if __name__ == "__main__":
    main()
