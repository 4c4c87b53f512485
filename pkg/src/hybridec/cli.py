"""Command-line front end.

Binds the modules into the analysis pipeline (identification check, then
nuisance fitting, estimation, inference, diagnostics) and exposes the
simulation harness and graph queries. All outputs are deterministic given
the flags and seed: JSON is key-sorted, CSV cells use repr floats.

Exit codes: 0 success, 1 internal error, 2 validation/configuration
error, 3 identification failure (graph veto without --force).
"""

from __future__ import annotations

import json
import os
import sys

import click

from . import __version__
from .data import TrialSchema, load_dataset
from .diagnostics import buckets_to_csv, diagnostics_report
from .errors import GraphError, HybridECError
from .estimators import EstimatorConfig, METHODS
from .graph import minimal_adjustment_sets, node_split, parse_graph, verify_adjustment
from .inference import bootstrap_interval, ic_interval
from .simulation import (
    power_cells_to_csv,
    power_curve,
    power_runs,
    run_replicates,
    setting_dgp,
    setting_runs,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_IDENTIFICATION = 3

_MODULE_PREFIX = {
    "SchemaError": "data",
    "ParseError": "data",
    "DatasetValidationError": "data",
    "LearnerError": "learners",
    "RankError": "learners",
    "DegenerateTargetError": "learners",
    "FoldDegenerateError": "learners",
    "EstimationError": "estimators",
    "NumericGuardError": "estimators",
    "InferenceError": "inference",
    "DiagnosticError": "diagnostics",
    "InsufficientOverlapError": "diagnostics",
    "HarnessError": "simulation",
}


def _fail(exc: HybridECError) -> "click.exceptions.Exit":
    """Validation-type failures exit 2; the graph veto (exit 3) is raised
    at the call sites, and unexpected exceptions fall through as exit 1."""
    prefix = _MODULE_PREFIX.get(
        type(exc).__name__, "graph" if isinstance(exc, GraphError) else "internal"
    )
    click.echo(f"error [{prefix}]: {exc}", err=True)
    return click.exceptions.Exit(EXIT_VALIDATION)


def _dump_json(document: dict, path: str | None) -> None:
    text = json.dumps(document, sort_keys=True, indent=2) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        click.echo(text, nl=False)


def _write_text(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        click.echo(text, nl=False)


def _read_workers() -> int:
    """EC_THREADS caps worker counts; results never depend on it."""
    raw = os.environ.get("EC_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise click.UsageError(f"EC_THREADS must be an integer, got {raw!r}")
    if workers < 1:
        raise click.UsageError("EC_THREADS must be >= 1")
    return workers


def _load_schema(schema_arg: str) -> TrialSchema:
    if os.path.exists(schema_arg):
        with open(schema_arg, encoding="utf-8") as handle:
            return TrialSchema.from_json(handle.read())
    return TrialSchema.from_json(schema_arg)


def _load_learners(learners_arg: str | None) -> dict:
    if not learners_arg:
        return {}
    if os.path.exists(learners_arg):
        with open(learners_arg, encoding="utf-8") as handle:
            return json.loads(handle.read())
    return json.loads(learners_arg)


@click.group()
@click.version_option(version=__version__, prog_name="hybridec")
def main() -> None:
    """Estimate treatment effects in trials augmented with external controls."""
    _read_workers()


@main.command("analyze")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--schema", "schema_arg", required=True, help="JSON schema document or file path")
@click.option("--graph", "graph_path", type=click.Path(exists=True), default=None)
@click.option("--adjust", "adjust_arg", default=None, help="comma-separated adjustment set; '' for the empty set")
@click.option("--methods", default="rct,om,ipdw,aipw,tmle", show_default=True)
@click.option("--learners", "learners_arg", default=None, help="JSON learner specs or file path")
@click.option("--folds", default=5, show_default=True)
@click.option("--boot", "n_boot", default=400, show_default=True)
@click.option("--level", default=0.95, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--treat-prob", "treat_prob", type=float, default=None, help="design value of Pr(A=1|D=1)")
@click.option("--r-mode", default="unit", type=click.Choice(["unit", "estimate"]), show_default=True)
@click.option("--width", default=0.05, show_default=True, help="diagnostic propensity-bucket width")
@click.option("--perms", "n_perm", default=2000, show_default=True)
@click.option("--hajek", is_flag=True, help="normalize weighting-estimator weights")
@click.option("--allow-flexible-bootstrap", is_flag=True)
@click.option("--force", is_flag=True, help="estimate even if the graph check fails")
@click.option("--out", "out_path", default=None, type=click.Path())
def cmd_analyze(
    data_path,
    schema_arg,
    graph_path,
    adjust_arg,
    methods,
    learners_arg,
    folds,
    n_boot,
    level,
    seed,
    treat_prob,
    r_mode,
    width,
    n_perm,
    hajek,
    allow_flexible_bootstrap,
    force,
    out_path,
):
    """Run the full pipeline on one dataset and emit a JSON report."""
    try:
        schema = _load_schema(schema_arg)
        specs = _load_learners(learners_arg)
        method_list = [m.strip() for m in methods.split(",") if m.strip()]
        for m in method_list:
            if m not in METHODS:
                raise click.UsageError(f"unknown method {m!r}; choose from {METHODS}")
        ds = load_dataset(data_path, schema, known_treat_prob=treat_prob)

        identification = None
        if graph_path:
            with open(graph_path, encoding="utf-8") as handle:
                diagram = parse_graph(handle.read())
            swig = node_split(diagram)
            if adjust_arg is None:
                adjust = tuple(schema.covariates)
            elif adjust_arg.strip() in ("", "-"):
                adjust = ()
            else:
                adjust = tuple(s.strip() for s in adjust_arg.split(","))
            verdict = verify_adjustment(swig, adjust)
            identification = {"graph": graph_path, "verdict": verdict.to_json(), "forced": False}
            if not verdict.sufficient:
                click.echo(
                    "identification check failed; open path: " + " -> ".join(verdict.witness),
                    err=True,
                )
                if not force:
                    raise click.exceptions.Exit(EXIT_IDENTIFICATION)
                identification["forced"] = True

        base = dict(
            specs=specs,
            truncation=0.01,
            r_mode=r_mode,
            use_known_treat_prob=True,
            hajek=hajek,
        )
        estimates = []
        fits_cache = {}
        for m in method_list:
            cfg = EstimatorConfig(method=m, folds=1 if m in ("om", "ipdw") else folds, **base)
            cache_key = cfg.folds
            if cache_key not in fits_cache:
                fits_cache[cache_key] = cfg.fit_nuisances(ds, seed=seed)
            est = cfg.estimate(ds, fits_cache[cache_key])
            if m in ("om", "ipdw"):
                inf = bootstrap_interval(
                    ds,
                    cfg,
                    n_boot=n_boot,
                    seed=seed,
                    level=level,
                    allow_flexible=allow_flexible_bootstrap,
                )
            else:
                inf = ic_interval(est, level=level)
            estimates.append({"estimate": est.to_json(), "inference": inf.to_json()})

        diag_cfg = EstimatorConfig(method="aipw", folds=folds, **base)
        diag_fits = fits_cache.get(folds)
        if diag_fits is None:  # diagnostics only read the study propensity
            diag_fits = diag_cfg.fit_nuisances(ds, seed=seed, only=("pd",))
        diag = diagnostics_report(ds, diag_fits, width=width, n_perm=n_perm, seed=seed)

        report = {
            "tool": {"name": "hybridec", "version": __version__},
            "config": {
                "data": data_path,
                "schema": schema.to_json(),
                "methods": method_list,
                "learners": specs,
                "folds": folds,
                "boot": n_boot,
                "level": level,
                "seed": seed,
                "treat_prob": treat_prob,
                "r_mode": r_mode,
                "width": width,
                "perms": n_perm,
                "hajek": hajek,
                "force": force,
            },
            "data": {"n_rows": ds.n_rows, "n_rct": ds.n_rct, "n_ec": ds.n_ec},
            "identification": identification,
            "estimates": estimates,
            "diagnostics": diag.to_json(),
        }
        _dump_json(report, out_path)

        click.echo(f"{'method':<8}{'tau':>10}{'ci_low':>10}{'ci_high':>10}{'p':>10}")
        for entry in estimates:
            est, inf = entry["estimate"], entry["inference"]
            click.echo(
                f"{est['method']:<8}{est['tau_hat']:>10.3f}{inf['ci_low']:>10.3f}"
                f"{inf['ci_high']:>10.3f}{inf['p_value']:>10.4f}"
            )
    except HybridECError as exc:
        raise _fail(exc)


@main.command("simulate")
@click.option("--setting", type=click.IntRange(1, 5), required=True)
@click.option("--reps", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--boot", "n_boot", default=400, show_default=True)
@click.option("--trees", default=100, show_default=True)
@click.option("--folds", default=5, show_default=True)
@click.option("--include-omitted", is_flag=True, help="also run the estimators the tables omit")
@click.option("--out", "out_path", default=None, type=click.Path(), help="CSV output path")
@click.option("--json", "json_path", default=None, type=click.Path())
def cmd_simulate(setting, reps, seed, n_boot, trees, folds, include_omitted, out_path, json_path):
    """Monte Carlo table for one specification setting."""
    try:
        config = setting_dgp(setting)
        runs = setting_runs(
            setting, n_boot=n_boot, trees=trees, folds=folds, include_omitted=include_omitted
        )
        result = run_replicates(config, runs, n_reps=reps, seed=seed)
        _write_text(result.to_csv(), out_path)
        if json_path:
            _dump_json(result.to_json(), json_path)
        if out_path:
            click.echo(f"wrote {out_path}")
    except HybridECError as exc:
        raise _fail(exc)


@main.command("power")
@click.option("--effects", default="0.0,0.3,0.6", show_default=True, help="comma-separated effect sizes")
@click.option("--n-ec", "n_ec_grid", default="50", show_default=True, help="comma-separated external pool sizes")
@click.option("--reps", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trees", default=100, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def cmd_power(effects, n_ec_grid, reps, seed, trees, out_path):
    """Power grid over effect sizes and external-control pool sizes."""
    try:
        config = setting_dgp(5)
        cells = power_curve(
            config,
            [float(v) for v in effects.split(",")],
            [int(v) for v in n_ec_grid.split(",")],
            power_runs(trees=trees),
            n_reps=reps,
            seed=seed,
        )
        _write_text(power_cells_to_csv(cells), out_path)
        if out_path:
            click.echo(f"wrote {out_path}")
    except HybridECError as exc:
        raise _fail(exc)


@main.command("diagnose")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--schema", "schema_arg", required=True)
@click.option("--learners", "learners_arg", default=None)
@click.option("--folds", default=5, show_default=True)
@click.option("--width", default=0.05, show_default=True)
@click.option("--perms", "n_perm", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--treat-prob", "treat_prob", type=float, default=None)
@click.option("--out", "out_path", default=None, type=click.Path(), help="JSON report path")
@click.option("--buckets-csv", "csv_path", default=None, type=click.Path())
def cmd_diagnose(data_path, schema_arg, learners_arg, folds, width, n_perm, seed, treat_prob, out_path, csv_path):
    """Propensity-difference, bucketed outcomes, and the implication test."""
    try:
        schema = _load_schema(schema_arg)
        ds = load_dataset(data_path, schema, known_treat_prob=treat_prob)
        cfg = EstimatorConfig(method="aipw", specs=_load_learners(learners_arg), folds=folds)
        fits = cfg.fit_nuisances(ds, seed=seed)
        report = diagnostics_report(ds, fits, width=width, n_perm=n_perm, seed=seed)
        _dump_json(report.to_json(), out_path)
        if csv_path:
            _write_text(buckets_to_csv(report.buckets), csv_path)
    except HybridECError as exc:
        raise _fail(exc)


@main.group("graph")
def cmd_graph() -> None:
    """Selection-diagram queries."""


@cmd_graph.command("check")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--adjust", "adjust_arg", required=True, help="comma-separated set; '' for empty")
def cmd_graph_check(graph_path, adjust_arg):
    """Check whether an adjustment set is sufficient."""
    try:
        with open(graph_path, encoding="utf-8") as handle:
            swig = node_split(parse_graph(handle.read()))
        if adjust_arg.strip() in ("", "-"):
            adjust = ()
        else:
            adjust = tuple(s.strip() for s in adjust_arg.split(","))
        verdict = verify_adjustment(swig, adjust)
        _dump_json(verdict.to_json(), None)
        if not verdict.sufficient:
            click.echo("open path: " + " -> ".join(verdict.witness), err=True)
            raise click.exceptions.Exit(EXIT_IDENTIFICATION)
    except HybridECError as exc:
        raise _fail(exc)


@cmd_graph.command("minimal")
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@click.option("--max-size", "max_size", type=int, default=None)
def cmd_graph_minimal(graph_path, max_size):
    """Enumerate inclusion-minimal sufficient adjustment sets."""
    try:
        with open(graph_path, encoding="utf-8") as handle:
            swig = node_split(parse_graph(handle.read()))
        sets = minimal_adjustment_sets(swig, max_size=max_size)
        _dump_json({"minimal_sets": [list(s) for s in sets]}, None)
    except HybridECError as exc:
        raise _fail(exc)


if __name__ == "__main__":
    main()
