"""Command-line surface: fit, scores, rates, simulate.

Flags override values from an optional JSON config file; every run writes its
fully resolved configuration next to its outputs so it can be reproduced
exactly.  Exit codes: 0 success, 1 input error, 2 convergence failure,
3 internal pathology.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .errors import ConditionAbortError, DataFormatError, JBLCSMError
from .estimation import FitConfig, ModelSpec, fit, wald_p_value
from .io import fmt, ingest_csv, write_csv, write_dataset_csv, write_json
from .scores import factor_scores, rate_curve_on_grid, score_midpoint_times
from .simulation import (
    MODEL_KEYS,
    MODEL_SPECS,
    condition_grid,
    format_tally,
    generate_dataset,
    improper_tally,
    replication_rng,
    run_condition,
)

_EXPRESSION_FLAGS = {"midpoint": "midpoint", "endpoint": "right_endpoint"}

_COMMON_DEFAULTS = {
    "model": "full",
    "expression": "midpoint",
    "framework": "lcsm",
    "seed": 0,
    "max_restarts": 10,
    "max_iterations": 500,
}


def _load_config_file(path):
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    return payload


def _resolve(command, defaults, config_path, flags):
    resolved = dict(defaults)
    if config_path:
        file_cfg = _load_config_file(config_path)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise DataFormatError(
                "unknown config keys: %s" % ", ".join(sorted(unknown))
            )
        resolved.update(file_cfg)
    for key, value in flags.items():
        if value is not None:
            resolved[key] = value
    resolved["command"] = command
    return resolved


def _require(resolved, key):
    if resolved.get(key) in (None, ""):
        raise DataFormatError(f"missing required option --{key}")
    return resolved[key]


def _model_spec(resolved) -> ModelSpec:
    expression = resolved["expression"]
    if expression in _EXPRESSION_FLAGS:
        expression = _EXPRESSION_FLAGS[expression]
    return ModelSpec(
        expression=expression,
        acceleration="random" if resolved["model"] == "full" else "fixed",
        framework=resolved["framework"],
    )


def _fit_config(resolved) -> FitConfig:
    return FitConfig(
        max_restarts=int(resolved["max_restarts"]),
        max_iterations=int(resolved["max_iterations"]),
    )


def _emit_config(out_dir: Path, resolved) -> None:
    write_json(out_dir / "config.json", resolved)


def _config_hash(resolved) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _improper_payload(flags):
    return {
        "negative_factor_variance": flags.negative_factor_variance,
        "out_of_range_correlation": flags.out_of_range_correlation,
        "negative_variance_factors": list(flags.negative_variance_factors),
        "out_of_range_pairs": [list(p) for p in flags.out_of_range_pairs],
    }


def _fit_in_place(resolved):
    data = ingest_csv(_require(resolved, "data"))
    spec = _model_spec(resolved)
    result = fit(data, spec, _fit_config(resolved), seed=int(resolved["seed"]))
    return data, spec, result


def _write_fit_outputs(out_dir: Path, result) -> None:
    rows = []
    for name, estimate, se in zip(result.param_names, result.theta, result.se):
        p = wald_p_value(estimate, se) if np.isfinite(se) else float("nan")
        rows.append([name, fmt(estimate), fmt(se), fmt(p)])
    write_csv(out_dir / "estimates.csv", ["parameter", "estimate", "se", "p_value"], rows)
    write_json(
        out_dir / "fit.json",
        {
            "status": result.status,
            "converged": result.converged,
            "loglik": result.loglik,
            "minus2ll": result.minus2ll,
            "aic": result.aic,
            "bic": result.bic,
            "n_params": result.n_params,
            "n_obs": result.n_obs,
            "improper": _improper_payload(result.improper),
            "model": {
                "expression": result.spec.expression,
                "acceleration": result.spec.acceleration,
                "framework": result.spec.framework,
            },
        },
    )


@click.group(name="jblcsm")
@click.version_option(version=__version__, prog_name="jblcsm")
def cli():
    """Jenss-Bayley latent change score models with individual occasions."""


_data_opt = click.option("--data", "data", type=str, default=None, help="Wide-format CSV (id,y1..yJ,t1..tJ).")
_model_opt = click.option("--model", type=click.Choice(["full", "reduced"]), default=None)
_expr_opt = click.option("--expression", type=click.Choice(["midpoint", "endpoint"]), default=None)
_frame_opt = click.option("--framework", type=click.Choice(["lcsm", "lgc"]), default=None)
_seed_opt = click.option("--seed", type=int, default=None)
_out_opt = click.option("--out", "out", type=str, default=None, help="Output directory.")
_config_opt = click.option("--config", "config_path", type=str, default=None, help="JSON config file; flags override it.")


@cli.command("fit")
@_data_opt
@_model_opt
@_expr_opt
@_frame_opt
@_seed_opt
@_out_opt
@_config_opt
def cmd_fit(config_path, **flags):
    """Fit one model and write estimates.csv + fit.json."""
    resolved = _resolve("fit", {**_COMMON_DEFAULTS, "data": None, "out": None}, config_path, flags)
    out_dir = Path(_require(resolved, "out"))
    _, _, result = _fit_in_place(resolved)
    _emit_config(out_dir, resolved)
    _write_fit_outputs(out_dir, result)
    sys.exit(0 if result.converged else 2)


@cli.command("scores")
@_data_opt
@_model_opt
@_expr_opt
@_frame_opt
@_seed_opt
@_out_opt
@_config_opt
def cmd_scores(config_path, **flags):
    """Fit in place, then write per-individual factor scores and rates."""
    resolved = _resolve("scores", {**_COMMON_DEFAULTS, "data": None, "out": None}, config_path, flags)
    out_dir = Path(_require(resolved, "out"))
    data, spec, result = _fit_in_place(resolved)
    _emit_config(out_dir, resolved)
    _write_fit_outputs(out_dir, result)
    if not result.converged:
        sys.exit(2)
    sets = factor_scores(data, result, spec)
    ids = data.ids or tuple(str(i + 1) for i in range(data.n))
    j = data.n_waves
    latent_names = (
        ["eta0", "eta1", "eta2", "gamma"]
        + [f"ly{w}" for w in range(1, j + 1)]
        + [f"dy{w}" for w in range(2, j + 1)]
    )
    score_rows = []
    for pid, latent in zip(ids, sets):
        stacked = np.concatenate([latent.growth_factors, latent.true_scores, latent.rates])
        for name, value in zip(latent_names, stacked):
            score_rows.append([pid, name, fmt(value), str(latent.ok)])
    write_csv(out_dir / "factor_scores.csv", ["id", "variable", "value", "ok"], score_rows)
    eval_times = score_midpoint_times(data, spec)
    rate_rows = []
    for i, (pid, latent) in enumerate(zip(ids, sets)):
        for t, rate in zip(eval_times[i], latent.rates):
            rate_rows.append([pid, fmt(t), fmt(rate)])
    write_csv(out_dir / "rates_individual.csv", ["id", "midpoint_time", "rate"], rate_rows)
    sys.exit(0)


@cli.command("rates")
@_data_opt
@_model_opt
@_expr_opt
@_frame_opt
@_seed_opt
@_out_opt
@_config_opt
@click.option("--grid", "grid", type=str, default=None, help="Time grid start:stop:count (default: data range, 50 points).")
def cmd_rates(config_path, **flags):
    """Fit in place, then write the mean rate curve with a 95% band."""
    resolved = _resolve(
        "rates", {**_COMMON_DEFAULTS, "data": None, "out": None, "grid": None},
        config_path, flags,
    )
    out_dir = Path(_require(resolved, "out"))
    data, spec, result = _fit_in_place(resolved)
    _emit_config(out_dir, resolved)
    _write_fit_outputs(out_dir, result)
    if not result.converged:
        sys.exit(2)
    grid_spec = resolved.get("grid")
    if grid_spec:
        try:
            start, stop, count = grid_spec.split(":")
            grid = np.linspace(float(start), float(stop), int(count))
        except ValueError:
            raise DataFormatError(f"--grid must be start:stop:count, got {grid_spec!r}") from None
    else:
        grid = np.linspace(float(data.times.min()), float(data.times.max()), 50)
    mean_rate, lower, upper = rate_curve_on_grid(result.estimates, grid, spec)
    rows = [
        [fmt(t), fmt(r), fmt(lo), fmt(hi)]
        for t, r, lo, hi in zip(grid, mean_rate, lower, upper)
    ]
    write_csv(out_dir / "rates_mean.csv", ["time", "mean_rate", "lower95", "upper95"], rows)
    sys.exit(0)


def _parse_conditions(text: str, grid_size: int):
    if text.strip().lower() == "all":
        return list(range(grid_size))
    indices = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "-" in chunk[1:]:
            lo, hi = chunk.split("-", 1)
            indices.extend(range(int(lo), int(hi) + 1))
        else:
            indices.append(int(chunk))
    bad = [i for i in indices if not 0 <= i < grid_size]
    if bad or not indices:
        raise DataFormatError(
            f"condition indices must lie in [0, {grid_size - 1}]; got {text!r}"
        )
    return sorted(set(indices))


_METRIC_FIELDS = ("bias", "empirical_se", "rmse", "coverage", "mc_se_bias")


@cli.command("simulate")
@click.option("--conditions", "conditions", type=str, default=None, help="'all' or indices like 0,3,10-12.")
@click.option("--reps", "reps", type=int, default=None, help="Convergent replications per condition.")
@_seed_opt
@_out_opt
@_config_opt
@click.option("--export-data", "export_data", is_flag=True, default=None, help="Also write each retained replication's dataset.")
def cmd_simulate(config_path, **flags):
    """Run Monte Carlo conditions and write metric tables + manifest."""
    defaults = {
        "conditions": "all",
        "reps": 100,
        "seed": 0,
        "out": None,
        "export_data": False,
        "models": list(MODEL_KEYS),
        "max_restarts": 10,
        "max_iterations": 500,
    }
    resolved = _resolve("simulate", defaults, config_path, flags)
    out_dir = Path(_require(resolved, "out"))
    reps = int(resolved["reps"])
    if reps < 1:
        raise DataFormatError("--reps must be >= 1")
    model_keys = tuple(resolved["models"])
    unknown = [k for k in model_keys if k not in MODEL_SPECS]
    if unknown:
        raise DataFormatError("unknown model keys: %s" % ", ".join(unknown))
    grid = condition_grid()
    selected = _parse_conditions(str(resolved["conditions"]), len(grid))
    _emit_config(out_dir, resolved)

    seed = int(resolved["seed"])
    fit_config = _fit_config(resolved)
    tally_rows = []
    summary_pool = {}
    status = {}
    for index in selected:
        cond = grid[index]
        cond_dir = out_dir / cond.slug
        try:
            records, summaries = run_condition(
                cond, reps, model_keys=model_keys, master_seed=seed,
                fit_config=fit_config,
            )
        except ConditionAbortError as exc:
            click.echo(f"condition {cond.slug}: aborted ({exc})", err=True)
            status[cond.slug] = {"index": index, "status": "aborted", "reason": str(exc)}
            continue
        attempts = len(records)
        successes = sum(1 for r in records if r.converged)
        status[cond.slug] = {
            "index": index,
            "status": "ok",
            "attempts": attempts,
            "successes": successes,
            "convergence_rate": successes / attempts,
        }
        metric_rows = []
        for key in model_keys:
            summary = summaries[key]
            for pm in summary.parameters:
                metric_rows.append(
                    [
                        key, pm.parameter, fmt(pm.truth), fmt(pm.bias),
                        "absolute" if pm.absolute else "relative",
                        fmt(pm.empirical_se), fmt(pm.rmse), fmt(pm.coverage),
                        fmt(pm.mc_se_bias),
                    ]
                )
                summary_pool.setdefault((key, pm.parameter), []).append(pm)
            if not MODEL_SPECS[key].reduced:
                neg, oob = improper_tally(records, key)
                tally_rows.append(
                    [cond.slug, key, str(neg), str(oob), format_tally(neg, oob)]
                )
        write_csv(
            cond_dir / f"metrics_{cond.slug}.csv",
            ["model", "parameter", "truth", "bias", "bias_scale",
             "empirical_se", "rmse", "coverage", "mc_se_bias"],
            metric_rows,
        )
        if resolved["export_data"]:
            retained = [r for r in records if r.converged][:reps]
            for r in retained:
                data, _ = generate_dataset(
                    cond, replication_rng(seed, cond, r.rep_index)
                )
                write_dataset_csv(cond_dir / f"data_rep{r.rep_index}.csv", data)

    write_csv(
        out_dir / "improper_tally.csv",
        ["condition", "model", "negative_gamma_variance",
         "out_of_range_gamma_correlation", "tally"],
        tally_rows,
    )
    summary_rows = []
    for (key, parameter), pms in sorted(summary_pool.items()):
        for metric in _METRIC_FIELDS:
            values = np.array([getattr(pm, metric) for pm in pms], dtype=float)
            summary_rows.append(
                [key, parameter, metric, fmt(np.median(values)),
                 fmt(values.min()), fmt(values.max())]
            )
    write_csv(
        out_dir / "summary.csv",
        ["model", "parameter", "metric", "median", "min", "max"],
        summary_rows,
    )
    write_json(
        out_dir / "manifest.json",
        {
            "seed": seed,
            "replications": reps,
            "models": list(model_keys),
            "conditions": status,
            "config_sha256": _config_hash(resolved),
            "package_version": __version__,
        },
    )
    sys.exit(0)


def main(argv=None):
    try:
        cli(args=argv, standalone_mode=False)
    except (DataFormatError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except JBLCSMError as exc:
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(3)
    except Exception as exc:  # pathology guard of last resort
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    main()
