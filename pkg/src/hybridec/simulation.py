"""Data-generating processes and the Monte Carlo harness.

The DGP family mirrors the hybrid-trial structure: trial covariates are
standard normal, external-control covariates are mean-shifted (and, in
nonlinear mode, rescaled, which makes a linear-logistic selection model
wrong); outcomes are linear in the covariates plus, in nonlinear mode,
curvature and an interaction that break linear outcome models. Treatment
is randomized at a fixed ratio inside the trial. Five specification
settings pair this family with correctly/incorrectly specified learners.
"""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrialDataset
from .errors import HarnessError, HybridECError
from .estimators import EstimatorConfig
from .inference import bootstrap_interval, ic_interval
from .learners import NuisanceFits

__all__ = [
    "DgpConfig",
    "TrueNuisances",
    "EstimatorRun",
    "EstimatorSummary",
    "SimulationResult",
    "PowerCell",
    "generate",
    "run_replicates",
    "power_curve",
    "setting_dgp",
    "setting_runs",
    "power_runs",
    "SETTINGS",
]

# Nonlinear-mode shape constants. The control surface gains tail-bounded
# curvature and a clipped interaction; the external covariate spread
# widens, which makes the true selection log-odds quadratic. Bounding the
# curvature in the tails, where trees extrapolate worst, is what lets
# flexible learners recover a nuisance well while linear fits of the same
# nuisance stay visibly wrong (the wide-spread externals pin the variance
# mismatch that a linear projection cannot absorb).
QUAD_AMP = 0.6
QUAD_CLIP = 4.0
INTER_AMP = 0.5
INTER_CLIP = 1.5
EC_SD_NONLINEAR = 1.35
NONLINEAR_SHIFT = (0.4, 0.4)

SETTINGS = (1, 2, 3, 4, 5)


def _geometric_coefs(p: int) -> tuple[float, ...]:
    return tuple(1.0 * 0.5**j for j in range(p))


@dataclass(frozen=True)
class DgpConfig:
    """One simulated hybrid trial.

    ``coef_pd`` is the slope of the true selection log-odds; in this
    Gaussian family it is interchangeable with a covariate shift of the
    external population (``shift_ec = -coef_pd``), so providing both is an
    error. ``ec_outcome_shift`` adds a constant to external control
    outcomes, deliberately violating mean-exchangeability for diagnostic
    power studies.
    """

    n_rct: int = 150
    rand_ratio: tuple[int, int] = (2, 1)
    n_ec: int = 50
    tau_true: float = 1.0
    covariate_dim: int = 2
    coef_outcome: tuple[float, ...] | None = None
    coef_pd: tuple[float, ...] | None = None
    shift_ec: tuple[float, ...] | None = None
    nonlinear: bool = False
    noise_sd: tuple[float, float] = (1.0, 1.0)  # (trial, external)
    ec_outcome_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rct < 2 or self.n_ec < 0:
            raise HarnessError("need n_rct >= 2 and n_ec >= 0")
        r_t, r_c = self.rand_ratio
        if r_t < 1 or r_c < 1:
            raise HarnessError("rand_ratio parts must be positive")
        if self.n_rct * r_t % (r_t + r_c):
            raise HarnessError(
                f"n_rct={self.n_rct} is not divisible for a {r_t}:{r_c} ratio"
            )
        if min(self.noise_sd) <= 0:
            raise HarnessError("noise_sd must be positive")
        if self.coef_pd is not None and self.shift_ec is not None:
            raise HarnessError("give either coef_pd or shift_ec, not both")

    @property
    def n_treated(self) -> int:
        r_t, r_c = self.rand_ratio
        return self.n_rct * r_t // (r_t + r_c)

    @property
    def treat_prob(self) -> float:
        return self.n_treated / self.n_rct

    def resolved_coef_outcome(self) -> np.ndarray:
        coefs = self.coef_outcome or _geometric_coefs(self.covariate_dim)
        if len(coefs) != self.covariate_dim:
            raise HarnessError("coef_outcome length must equal covariate_dim")
        return np.asarray(coefs, dtype=np.float64)

    def resolved_shift(self) -> np.ndarray:
        if self.coef_pd is not None:
            shift = tuple(-c for c in self.coef_pd)
        elif self.shift_ec is not None:
            shift = self.shift_ec
        else:
            shift = (0.4,) * self.covariate_dim
        if len(shift) != self.covariate_dim:
            raise HarnessError("shift vector length must equal covariate_dim")
        return np.asarray(shift, dtype=np.float64)

    def ec_scale(self) -> np.ndarray:
        """Per-covariate spread of the external population."""
        scale = np.ones(self.covariate_dim)
        if self.nonlinear:
            scale[:] = EC_SD_NONLINEAR
        return scale

    def control_surface(self, x: np.ndarray) -> np.ndarray:
        """Expected control outcome as a function of covariates."""
        m = x @ self.resolved_coef_outcome()
        if self.nonlinear:
            m = m + QUAD_AMP * (np.minimum(x[:, 0] ** 2, QUAD_CLIP) - 1.0)
            if self.covariate_dim >= 2:
                c = INTER_CLIP
                m = m + INTER_AMP * np.clip(x[:, 0], -c, c) * np.clip(x[:, 1], -c, c)
        return m

    def to_json(self) -> dict:
        return {
            "n_rct": self.n_rct,
            "rand_ratio": list(self.rand_ratio),
            "n_ec": self.n_ec,
            "tau_true": self.tau_true,
            "covariate_dim": self.covariate_dim,
            "coef_outcome": list(self.resolved_coef_outcome()),
            "shift_ec": list(self.resolved_shift()),
            "nonlinear": self.nonlinear,
            "noise_sd": list(self.noise_sd),
            "ec_outcome_shift": self.ec_outcome_shift,
            "seed": self.seed,
        }


def generate(config: DgpConfig) -> TrialDataset:
    """Draw one dataset: trial rows first, then external controls."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(config.seed)))
    p = config.covariate_dim
    shift = config.resolved_shift()

    x_rct = rng.normal(size=(config.n_rct, p))
    x_ec = shift + config.ec_scale() * rng.normal(size=(config.n_ec, p))
    x = np.vstack([x_rct, x_ec])

    a = np.zeros(config.n_rct + config.n_ec, dtype=np.int8)
    treated_slots = rng.permutation(config.n_rct)[: config.n_treated]
    a[treated_slots] = 1
    d = np.zeros_like(a)
    d[: config.n_rct] = 1

    noise_sd = np.where(d == 1, config.noise_sd[0], config.noise_sd[1])
    y = (
        config.control_surface(x)
        + config.tau_true * a
        + (d == 0) * config.ec_outcome_shift
        + noise_sd * rng.normal(size=len(a))
    )
    return TrialDataset.from_arrays(
        outcome=y,
        covariates=x,
        treatment=a,
        source=d,
        covariate_names=tuple(f"x{j + 1}" for j in range(p)),
        known_treat_prob=config.treat_prob,
    )


class TrueNuisances:
    """Analytic nuisance functions implied by a :class:`DgpConfig`.

    Lets the harness bypass learners entirely, which pins down the DGP and
    estimator algebra independently of any fitting code.
    """

    def __init__(self, config: DgpConfig):
        self.config = config
        self.shift = config.resolved_shift()
        self.q = config.n_rct / (config.n_rct + config.n_ec)

    def m0(self, x: np.ndarray) -> np.ndarray:
        return self.config.control_surface(np.atleast_2d(x))

    def m1(self, x: np.ndarray) -> np.ndarray:
        return self.m0(x) + self.config.tau_true

    def pa(self) -> float:
        return self.config.treat_prob

    def pd(self, x: np.ndarray) -> np.ndarray:
        """Bayes posterior of trial membership from the two covariate laws."""
        x = np.atleast_2d(x)
        s = self.config.ec_scale()
        log_f1 = -0.5 * np.sum(x**2, axis=1)
        log_f0 = -0.5 * np.sum(((x - self.shift) / s) ** 2, axis=1) - float(np.sum(np.log(s)))
        logit = math.log(self.q / (1.0 - self.q)) + log_f1 - log_f0
        return 1.0 / (1.0 + np.exp(-np.clip(logit, -36, 36)))

    def variance_ratio(self) -> float:
        return (self.config.noise_sd[0] / self.config.noise_sd[1]) ** 2

    def as_fits(self, ds: TrialDataset) -> NuisanceFits:
        x = ds.covariates
        m0 = self.m0(x)
        return NuisanceFits(
            m0_hat=m0,
            m1_hat=self.m1(x),
            pa_hat=np.full(ds.n_rows, self.pa()),
            pd_hat=np.clip(self.pd(x), 0.01, 0.99),
            r_hat=np.full(ds.n_rows, self.variance_ratio()),
            m0_rct_hat=m0.copy(),
            fold_id=np.zeros(ds.n_rows, dtype=np.int64),
            q_hat=ds.n_rct / ds.n_rows,
        )


@dataclass(frozen=True)
class EstimatorRun:
    """One estimator entry in the harness: pipeline plus inference choice."""

    name: str
    config: EstimatorConfig
    inference: str = "ic"  # "ic" or "bootstrap"
    n_boot: int = 400
    allow_flexible: bool = False

    def __post_init__(self):
        if self.inference not in ("ic", "bootstrap"):
            raise HarnessError(f"unknown inference {self.inference!r}")


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    method: str
    n_used: int
    n_failed: int
    bias: float
    variance: float
    mse: float
    coverage: float
    rejection_rate: float
    mean_ci_width: float

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "method": self.method,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
            "bias": self.bias,
            "variance": self.variance,
            "mse": self.mse,
            "coverage": self.coverage,
            "rejection_rate": self.rejection_rate,
            "mean_ci_width": self.mean_ci_width,
        }


@dataclass(frozen=True)
class SimulationResult:
    config: DgpConfig
    n_reps: int
    level: float
    seed: int
    estimators: tuple[EstimatorSummary, ...]

    def by_name(self, name: str) -> EstimatorSummary:
        for summary in self.estimators:
            if summary.name == name:
                return summary
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "n_reps": self.n_reps,
            "level": self.level,
            "seed": self.seed,
            "estimators": [s.to_json() for s in self.estimators],
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(
            [
                "estimator",
                "method",
                "n_used",
                "n_failed",
                "bias",
                "variance",
                "mse",
                "coverage",
                "rejection_rate",
                "mean_ci_width",
            ]
        )
        for s in self.estimators:
            writer.writerow(
                [
                    s.name,
                    s.method,
                    s.n_used,
                    s.n_failed,
                    repr(s.bias),
                    repr(s.variance),
                    repr(s.mse),
                    repr(s.coverage),
                    repr(s.rejection_rate),
                    repr(s.mean_ci_width),
                ]
            )
        return out.getvalue()


def _rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence(entropy=(int(seed), int(rep))).generate_state(1, np.uint64)[0])


def _fits_key(config: EstimatorConfig) -> tuple:
    spec_items = tuple(
        sorted((k, tuple(sorted((v.to_json() if hasattr(v, "to_json") else dict(v)).items())))
               for k, v in config.specs.items())
    )
    return (
        spec_items,
        config.folds,
        config.truncation,
        config.r_mode,
        config.use_known_treat_prob,
    )


def run_replicates(
    config: DgpConfig,
    runs,
    n_reps: int,
    seed: int = 0,
    level: float = 0.95,
    max_failure_rate: float = 0.01,
) -> SimulationResult:
    """Monte Carlo over fresh datasets; per-estimator bias, MSE, coverage,
    rejection of tau = 0, and mean interval width.

    Replicate seeds are derived from (seed, replicate) so the result is
    independent of execution order. Replicates where an estimator fails
    are excluded from its summary and counted; a failure share above
    ``max_failure_rate`` for any estimator aborts the harness.
    """
    if n_reps < 1:
        raise HarnessError("n_reps must be positive")
    names = [run.name for run in runs]
    if len(set(names)) != len(names):
        raise HarnessError("estimator run names must be unique")

    taus = {run.name: [] for run in runs}
    covered = {run.name: [] for run in runs}
    rejected = {run.name: [] for run in runs}
    widths = {run.name: [] for run in runs}
    failures = {run.name: 0 for run in runs}

    for rep in range(n_reps):
        rep_seed = _rep_seed(seed, rep)
        ds = generate(replace(config, seed=rep_seed))
        fits_cache: dict = {}
        for run in runs:
            try:
                key = _fits_key(run.config)
                if key not in fits_cache:
                    fits_cache[key] = run.config.fit_nuisances(ds, seed=rep_seed)
                est = run.config.estimate(ds, fits_cache[key])
                if run.inference == "ic":
                    inf = ic_interval(est, level=level)
                else:
                    inf = bootstrap_interval(
                        ds,
                        run.config,
                        n_boot=run.n_boot,
                        seed=rep_seed,
                        level=level,
                        allow_flexible=run.allow_flexible,
                    )
            except HybridECError:
                failures[run.name] += 1
                continue
            taus[run.name].append(est.tau_hat)
            covered[run.name].append(inf.ci_low <= config.tau_true <= inf.ci_high)
            rejected[run.name].append(inf.ci_low > 0.0 or inf.ci_high < 0.0)
            widths[run.name].append(inf.ci_high - inf.ci_low)

    summaries = []
    for run in runs:
        n_failed = failures[run.name]
        if n_failed > max_failure_rate * n_reps:
            raise HarnessError(
                f"estimator {run.name!r} failed on {n_failed}/{n_reps} replicates"
            )
        tau_arr = np.asarray(taus[run.name])
        bias = float(np.mean(tau_arr) - config.tau_true)
        mse = float(np.mean((tau_arr - config.tau_true) ** 2))
        summaries.append(
            EstimatorSummary(
                name=run.name,
                method=run.config.method,
                n_used=len(tau_arr),
                n_failed=n_failed,
                bias=bias,
                variance=mse - bias**2,
                mse=mse,
                coverage=float(np.mean(covered[run.name])),
                rejection_rate=float(np.mean(rejected[run.name])),
                mean_ci_width=float(np.mean(widths[run.name])),
            )
        )
    return SimulationResult(
        config=config, n_reps=n_reps, level=level, seed=seed, estimators=tuple(summaries)
    )


@dataclass(frozen=True)
class PowerCell:
    effect: float
    n_ec: int
    name: str
    rejection_rate: float
    n_used: int
    n_failed: int

    def to_json(self) -> dict:
        return {
            "effect": self.effect,
            "n_ec": self.n_ec,
            "name": self.name,
            "rejection_rate": self.rejection_rate,
            "n_used": self.n_used,
            "n_failed": self.n_failed,
        }


def power_curve(
    config: DgpConfig,
    effect_grid,
    n_ec_grid,
    runs,
    n_reps: int,
    seed: int = 0,
    level: float = 0.95,
) -> list[PowerCell]:
    """Rejection rate of tau = 0 over the (effect size, external pool size)
    grid; an effect of zero gives the type-I error row."""
    effect_grid = list(effect_grid)
    n_ec_grid = list(n_ec_grid)
    if not effect_grid or not n_ec_grid:
        raise HarnessError("effect and n_ec grids must be nonempty")
    cells = []
    for i, effect in enumerate(effect_grid):
        for j, n_ec in enumerate(n_ec_grid):
            cell_seed = int(
                np.random.SeedSequence(entropy=(int(seed), 977, i, j)).generate_state(
                    1, np.uint64
                )[0]
            )
            result = run_replicates(
                replace(config, tau_true=float(effect), n_ec=int(n_ec)),
                runs,
                n_reps=n_reps,
                seed=cell_seed,
                level=level,
            )
            for summary in result.estimators:
                cells.append(
                    PowerCell(
                        effect=float(effect),
                        n_ec=int(n_ec),
                        name=summary.name,
                        rejection_rate=summary.rejection_rate,
                        n_used=summary.n_used,
                        n_failed=summary.n_failed,
                    )
                )
    return cells


def power_cells_to_csv(cells) -> str:
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["effect", "n_ec", "estimator", "rejection_rate", "n_used", "n_failed"])
    for c in cells:
        writer.writerow([repr(c.effect), c.n_ec, c.name, repr(c.rejection_rate), c.n_used, c.n_failed])
    return out.getvalue()


# --- Specification settings -------------------------------------------------
#
# Setting 1: all-linear DGP, correctly specified linear/logistic learners.
# Setting 2: nonlinear DGP; study propensity fit with a (wrong) linear
#            logistic model, outcome regressions with forests.
# Setting 3: nonlinear DGP; outcome regressions (wrong) linear, study
#            propensity fit with a forest.
# Setting 4: nonlinear DGP; every nuisance fit with wrong linear models.
# Setting 5: nonlinear DGP; forests for both nuisances.
#
# The outcome-model estimator is omitted in Setting 2 and the weighting
# estimator in Setting 3 (their nuisance would be forest-based, where the
# bootstrap has no guarantee); pass include_omitted=True to run them with
# the flexible-bootstrap override.

_LINEAR = {"m0": {"kind": "linear"}, "pd": {"kind": "logistic"}, "pa": {"kind": "logistic"}}


def _forest_spec(trees: int) -> dict:
    # mtry = p: with two covariates, restricted split candidates cost more
    # in bias than they buy in decorrelation
    return {"kind": "random_forest", "trees": trees, "min_leaf": 5, "mtry": 2}


def setting_dgp(setting: int, **overrides) -> DgpConfig:
    if setting not in SETTINGS:
        raise HarnessError(f"setting must be one of {SETTINGS}")
    defaults = dict(nonlinear=setting != 1)
    if setting != 1 and "coef_pd" not in overrides:
        defaults["shift_ec"] = NONLINEAR_SHIFT
    defaults.update(overrides)
    return DgpConfig(**defaults)


def _run(name, method, specs, folds, inference="ic", n_boot=400, allow_flexible=False):
    return EstimatorRun(
        name=name,
        config=EstimatorConfig(method=method, specs=specs, folds=folds),
        inference=inference,
        n_boot=n_boot,
        allow_flexible=allow_flexible,
    )


def setting_runs(
    setting: int,
    n_boot: int = 400,
    trees: int = 100,
    folds: int = 5,
    include_omitted: bool = False,
) -> tuple[EstimatorRun, ...]:
    """Estimator lineup for one specification setting (see module notes)."""
    if setting not in SETTINGS:
        raise HarnessError(f"setting must be one of {SETTINGS}")
    forest = _forest_spec(trees)
    m_forest = {"m0": forest, "pd": {"kind": "logistic"}}
    both_forest = {"m0": forest, "pd": forest}
    pd_forest = {"m0": {"kind": "linear"}, "pd": forest}

    if setting == 1:
        return (
            _run("rct", "rct", _LINEAR, folds),
            _run("om", "om", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("ipdw", "ipdw", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("aipw", "aipw", _LINEAR, folds),
            _run("tmle", "tmle", _LINEAR, folds),
        )
    if setting == 2:
        runs = [
            _run("rct", "rct", m_forest, folds),
            _run("ipdw", "ipdw", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("aipw", "aipw", m_forest, folds),
            _run("tmle", "tmle", m_forest, folds),
        ]
        if include_omitted:
            runs.insert(
                1,
                _run("om", "om", m_forest, folds, inference="bootstrap", n_boot=n_boot, allow_flexible=True),
            )
        return tuple(runs)
    if setting == 3:
        runs = [
            _run("rct", "rct", _LINEAR, folds),
            _run("om", "om", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("aipw", "aipw", pd_forest, folds),
            _run("tmle", "tmle", pd_forest, folds),
        ]
        if include_omitted:
            runs.insert(
                2,
                _run("ipdw", "ipdw", pd_forest, folds, inference="bootstrap", n_boot=n_boot, allow_flexible=True),
            )
        return tuple(runs)
    if setting == 4:
        return (
            _run("rct", "rct", _LINEAR, folds),
            _run("om", "om", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("ipdw", "ipdw", _LINEAR, 1, inference="bootstrap", n_boot=n_boot),
            _run("aipw", "aipw", _LINEAR, folds),
            _run("tmle", "tmle", _LINEAR, folds),
        )
    return (
        _run("rct", "rct", m_forest, folds),
        _run("om", "om", both_forest, folds, inference="bootstrap", n_boot=n_boot, allow_flexible=True),
        _run("ipdw", "ipdw", both_forest, folds, inference="bootstrap", n_boot=n_boot, allow_flexible=True),
        _run("aipw", "aipw", both_forest, folds),
        _run("tmle", "tmle", both_forest, folds),
    )


def power_runs(trees: int = 100, folds: int = 5) -> tuple[EstimatorRun, ...]:
    """Estimators for the power study: the trial-only benchmark against the
    two efficient estimators, all with forest nuisances."""
    forest = _forest_spec(trees)
    m_forest = {"m0": forest, "pd": {"kind": "logistic"}}
    both_forest = {"m0": forest, "pd": forest}
    return (
        _run("rct", "rct", m_forest, folds),
        _run("aipw", "aipw", both_forest, folds),
        _run("tmle", "tmle", both_forest, folds),
    )
