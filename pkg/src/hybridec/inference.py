"""Confidence intervals and tests.

Closed-form influence-curve intervals serve the estimators that carry
per-row EIF values (trial-only, augmented, targeted); the outcome-model
and weighting estimators get a stratified nonparametric bootstrap with a
percentile interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import TrialDataset
from .errors import EstimationError, InferenceError, LearnerError
from .estimators import EstimatorConfig, TauEstimate

__all__ = [
    "InferenceResult",
    "z_critical",
    "ic_interval",
    "bootstrap_interval",
    "hypothesis_test",
]

MAX_REDRAW_FACTOR = 10


@dataclass(frozen=True)
class InferenceResult:
    tau_hat: float
    se: float
    ci_low: float
    ci_high: float
    level: float
    p_value: float
    method: str  # "influence_curve" or "bootstrap_percentile"
    n_boot: int | None = None
    degenerate: bool = False

    def to_json(self) -> dict:
        doc = {
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "p_value": self.p_value,
            "method": self.method,
        }
        if self.n_boot is not None:
            doc["n_boot"] = self.n_boot
        if self.degenerate:
            doc["degenerate"] = True
        return doc


def z_critical(level: float) -> float:
    """Two-sided normal critical value; the canonical 95% level uses the
    conventional 1.96 so interval arithmetic matches hand calculations."""
    if not 0 < level < 1:
        raise InferenceError(f"level must be in (0, 1), got {level}")
    if level == 0.95:
        return 1.96
    return float(stats.norm.ppf(0.5 + level / 2.0))


def _two_sided_p(z: float) -> float:
    return float(2.0 * stats.norm.sf(abs(z)))


def ic_interval(est: TauEstimate, level: float = 0.95) -> InferenceResult:
    """Wald interval from the sample variance of the influence-curve values."""
    if est.eif_values is None:
        raise InferenceError(
            f"method {est.method!r} carries no influence-curve values; "
            "use bootstrap_interval instead"
        )
    n = est.n_rows
    variance = float(np.var(est.eif_values, ddof=1)) if n > 1 else 0.0
    se = float(np.sqrt(variance / n))
    z = z_critical(level)
    degenerate = se == 0.0
    if degenerate:
        p = 1.0 if est.tau_hat == 0.0 else 0.0
    else:
        p = _two_sided_p(est.tau_hat / se)
    return InferenceResult(
        tau_hat=est.tau_hat,
        se=se,
        ci_low=est.tau_hat - z * se,
        ci_high=est.tau_hat + z * se,
        level=level,
        p_value=p,
        method="influence_curve",
        degenerate=degenerate,
    )


def _stratified_resample(ds: TrialDataset, rng: np.random.Generator) -> np.ndarray:
    """Row indices resampled with replacement within each (A, D) cell, so
    every resample keeps both trial arms and the external pool."""
    idx_parts = []
    for mask in (
        (ds.source == 1) & (ds.treatment == 1),
        (ds.source == 1) & (ds.treatment == 0),
        ds.source == 0,
    ):
        cell = np.flatnonzero(mask)
        if len(cell):
            idx_parts.append(rng.choice(cell, size=len(cell), replace=True))
    return np.sort(np.concatenate(idx_parts))


def _resampled_dataset(ds: TrialDataset, idx: np.ndarray) -> TrialDataset:
    return TrialDataset.from_arrays(
        outcome=ds.outcome[idx],
        covariates=ds.covariates[idx],
        treatment=ds.treatment[idx],
        source=ds.source[idx],
        covariate_names=ds.covariate_names,
        known_treat_prob=ds.known_treat_prob,
        validate=False,
    )


_DONSKER_KINDS = {"linear", "logistic", "constant"}


def bootstrap_interval(
    ds: TrialDataset,
    pipeline: EstimatorConfig,
    n_boot: int = 500,
    seed: int = 0,
    level: float = 0.95,
    allow_flexible: bool = False,
) -> InferenceResult:
    """Percentile bootstrap for the outcome-model and weighting estimators.

    Resampling is stratified by (A, D) cell; nuisances are refit on every
    resample with the same pipeline. Flexible learners void the bootstrap
    guarantee, so they are rejected unless explicitly allowed.
    """
    if pipeline.method not in ("om", "ipdw"):
        raise InferenceError(
            f"bootstrap inference supports om/ipdw, not {pipeline.method!r}; "
            "influence-curve intervals cover the rest"
        )
    if n_boot < 2:
        raise InferenceError("n_boot must be at least 2")
    if not allow_flexible:
        from .learners import resolve_specs

        flexible = [
            key
            for key, spec in resolve_specs(pipeline.specs).items()
            if spec.kind not in _DONSKER_KINDS
        ]
        if flexible:
            raise InferenceError(
                f"bootstrap with flexible learners for {flexible} needs allow_flexible=True"
            )

    point = pipeline.run(ds, seed=seed, lean=True)
    stats_boot = np.empty(n_boot)
    draws = 0
    max_draws = MAX_REDRAW_FACTOR * n_boot
    b = 0
    while b < n_boot:
        if draws >= max_draws:
            raise InferenceError("too many degenerate bootstrap resamples")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(29, draws))
        )
        draws += 1
        idx = _stratified_resample(ds, rng)
        sample = _resampled_dataset(ds, idx)
        report = sample.validation_report()
        if not report.passed:
            continue
        try:
            stats_boot[b] = pipeline.run(sample, seed=seed, lean=True).tau_hat
        except (LearnerError, EstimationError):
            continue
        b += 1

    alpha = 1.0 - level
    ci_low, ci_high = np.quantile(stats_boot, [alpha / 2.0, 1.0 - alpha / 2.0])
    se = float(np.std(stats_boot, ddof=1))
    n_low = int(np.sum(stats_boot <= 0.0))
    n_high = int(np.sum(stats_boot >= 0.0))
    p = min(1.0, 2.0 * min(n_low + 1, n_high + 1) / (n_boot + 1))
    return InferenceResult(
        tau_hat=point.tau_hat,
        se=se,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        level=level,
        p_value=p,
        method="bootstrap_percentile",
        n_boot=n_boot,
        degenerate=se == 0.0,
    )


def hypothesis_test(inf: InferenceResult, null_value: float = 0.0) -> tuple[float, float]:
    """Two-sided z-test of ``tau = null_value``; returns (statistic, p)."""
    if inf.se == 0.0:
        return (0.0 if inf.tau_hat == null_value else np.inf * np.sign(inf.tau_hat - null_value)), (
            1.0 if inf.tau_hat == null_value else 0.0
        )
    z = (inf.tau_hat - null_value) / inf.se
    return float(z), _two_sided_p(z)
