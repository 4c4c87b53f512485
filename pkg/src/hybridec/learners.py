"""Nuisance-model fitting and cross-fitting.

Four learner kinds are supported: ordinary/ridge least squares, logistic
regression by IRLS, an in-house random forest, and a constant fit. The
``crossfit`` entry point produces out-of-fold predictions for every
nuisance required by the estimators: outcome regressions under control and
treatment, the treatment propensity within the trial, the study propensity
(probability of belonging to the trial), and the control-variance ratio.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from ._forest import Forest
from .data import TrialDataset
from .errors import (
    DegenerateTargetError,
    FoldDegenerateError,
    LearnerError,
    RankError,
)

__all__ = [
    "LearnerSpec",
    "NuisanceFits",
    "fit",
    "crossfit",
    "estimate_variance_ratio",
    "default_specs",
]

LEARNER_KINDS = ("linear", "logistic", "random_forest", "constant")

PD_TRUNCATION = 0.01
PROB_EPS = 1e-12
R_CLIP = (0.1, 10.0)
MIN_VARIANCE_ROWS = 5


@dataclass(frozen=True)
class LearnerSpec:
    """Configuration of a single nuisance learner.

    ``mtry`` defaults to ceil(sqrt(p)) for binary targets and ceil(p/3)
    for continuous ones; ``ridge`` applies to linear and logistic fits.
    """

    kind: str = "linear"
    trees: int = 200
    min_leaf: int = 5
    mtry: int | None = None
    ridge: float = 0.0

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise LearnerError(f"unknown learner kind {self.kind!r}; expected one of {LEARNER_KINDS}")
        if self.trees < 1 or self.min_leaf < 1:
            raise LearnerError("trees and min_leaf must be positive")
        if self.ridge < 0:
            raise LearnerError("ridge must be nonnegative")

    @classmethod
    def from_json(cls, document: str | dict) -> "LearnerSpec":
        doc = json.loads(document) if isinstance(document, str) else dict(document)
        kind = doc.pop("kind", "linear")
        return cls(kind=kind, **doc)

    def to_json(self) -> dict:
        doc = {"kind": self.kind}
        if self.kind == "random_forest":
            doc.update(trees=self.trees, min_leaf=self.min_leaf)
            if self.mtry is not None:
                doc["mtry"] = self.mtry
        if self.kind in ("linear", "logistic") and self.ridge:
            doc["ridge"] = self.ridge
        return doc


def _add_intercept(x: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((x.shape[0], 1)), x])


class LinearModel:
    def __init__(self, coef: np.ndarray):
        self.coef = coef

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _add_intercept(np.asarray(x, dtype=np.float64)) @ self.coef


class LogisticModel:
    def __init__(self, coef: np.ndarray, converged: bool):
        self.coef = coef
        self.converged = converged

    def predict(self, x: np.ndarray) -> np.ndarray:
        eta = _add_intercept(np.asarray(x, dtype=np.float64)) @ self.coef
        prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -36, 36)))
        return np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)


class ConstantModel:
    def __init__(self, value: float):
        self.value = value

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(x).shape[0], self.value, dtype=np.float64)


def _fit_linear(x, y, weights, ridge):
    design = _add_intercept(x)
    n, k = design.shape
    if n < 2:
        raise LearnerError(f"linear fit needs at least 2 rows, got {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    xtw = design.T * w
    gram = xtw @ design
    if ridge > 0:
        penalty = np.eye(k) * ridge
        penalty[0, 0] = 0.0
        gram = gram + penalty
    elif np.linalg.matrix_rank(gram) < k:
        raise RankError("singular design matrix in linear fit (set ridge > 0 to regularize)")
    coef = np.linalg.solve(gram, xtw @ y)
    return LinearModel(coef)


def _fit_logistic(x, y, weights, ridge, max_iter=100, tol=1e-8):
    """IRLS with an optional ridge penalty (intercept unpenalized)."""
    y = np.asarray(y, dtype=np.float64)
    classes = np.unique(y)
    if not np.isin(classes, (0.0, 1.0)).all():
        raise LearnerError("logistic fit requires a 0/1 target")
    if len(classes) < 2:
        raise DegenerateTargetError("logistic target has a single class")
    design = _add_intercept(x)
    n, k = design.shape
    base_w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if ridge == 0 and np.linalg.matrix_rank(design) < k:
        raise RankError("singular design matrix in logistic fit (set ridge > 0 to regularize)")
    penalty = np.eye(k) * ridge
    penalty[0, 0] = 0.0

    coef = np.zeros(k)
    converged = False
    for _ in range(max_iter):
        eta = np.clip(design @ coef, -30, 30)
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = np.maximum(base_w * mu * (1.0 - mu), 1e-10)
        z = eta + (y - mu) / np.maximum(mu * (1.0 - mu), 1e-10)
        xtw = design.T * w
        try:
            new_coef = np.linalg.solve(xtw @ design + penalty, xtw @ z)
        except np.linalg.LinAlgError as exc:
            raise RankError("IRLS normal equations singular") from exc
        step = np.max(np.abs(new_coef - coef))
        coef = new_coef
        if step < tol:
            converged = True
            break
    return LogisticModel(coef, converged)


def _fit_forest(x, y, spec: LearnerSpec, seed: int):
    n, p = x.shape
    if n < spec.min_leaf:
        raise LearnerError(f"forest fit needs at least min_leaf={spec.min_leaf} rows, got {n}")
    is_binary = np.isin(np.unique(y), (0.0, 1.0)).all()
    if spec.mtry is not None:
        mtry = spec.mtry
    elif is_binary:
        mtry = math.ceil(math.sqrt(p))
    else:
        mtry = math.ceil(p / 3)
    return Forest(n_trees=spec.trees, min_leaf=spec.min_leaf, mtry=min(mtry, p), seed=seed).fit(x, y)


def fit(spec: LearnerSpec, features, target, weights=None, seed: int = 0):
    """Fit one learner; the returned model supports ``predict(matrix)``.

    ``seed`` only matters for the random forest (bootstrap and feature
    subsampling); the other kinds are deterministic by construction.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.asarray(target, dtype=np.float64)
    if x.shape[0] != len(y):
        raise LearnerError(f"features have {x.shape[0]} rows but target has {len(y)}")
    if spec.kind == "linear":
        return _fit_linear(x, y, weights, spec.ridge)
    if spec.kind == "logistic":
        return _fit_logistic(x, y, weights, spec.ridge)
    if spec.kind == "constant":
        w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
        return ConstantModel(float(np.sum(w * y) / np.sum(w)))
    if weights is not None:
        raise LearnerError("random_forest does not support observation weights")
    return _fit_forest(x, y, spec, seed)


def default_specs() -> dict[str, LearnerSpec]:
    return {
        "m0": LearnerSpec("linear"),
        "m1": LearnerSpec("linear"),
        "pa": LearnerSpec("logistic"),
        "pd": LearnerSpec("logistic"),
        "r": LearnerSpec("linear"),
    }


def resolve_specs(specs: dict | None) -> dict[str, LearnerSpec]:
    """Fill unspecified nuisances with defaults; ``m1`` inherits ``m0``."""
    resolved = default_specs()
    if specs:
        given = {
            key: value if isinstance(value, LearnerSpec) else LearnerSpec.from_json(value)
            for key, value in specs.items()
        }
        unknown = set(given) - set(resolved)
        if unknown:
            raise LearnerError(f"unknown nuisance keys {sorted(unknown)}")
        if "m0" in given and "m1" not in given:
            given["m1"] = given["m0"]
        resolved.update(given)
    return resolved


@dataclass(frozen=True)
class NuisanceFits:
    """Per-row cross-fitted nuisance predictions.

    ``m0_rct_hat`` is the control-outcome regression refit on internal
    controls only; it backs the trial-only benchmark estimator and plays
    no role in the external-control estimators.
    """

    m0_hat: np.ndarray
    m1_hat: np.ndarray
    pa_hat: np.ndarray
    pd_hat: np.ndarray
    r_hat: np.ndarray
    m0_rct_hat: np.ndarray
    fold_id: np.ndarray
    q_hat: float
    truncation: float = PD_TRUNCATION
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        for arr in (
            self.m0_hat,
            self.m1_hat,
            self.pa_hat,
            self.pd_hat,
            self.r_hat,
            self.m0_rct_hat,
            self.fold_id,
        ):
            arr.flags.writeable = False


def _model_seed(seed: int, fold: int, slot: int) -> int:
    return (int(seed) * 1000003 + (fold + 1) * 10007 + slot) & 0x7FFFFFFFFFFFFFFF


def _assign_folds(ds: TrialDataset, folds: int, seed: int) -> np.ndarray:
    """Stratified fold labels: each (A, D) cell is dealt round-robin.

    Retries with reseeded shuffles, then fails, when a fold would miss a
    trial arm (or leave some training complement without externals).
    """
    cells = [
        (ds.source == 1) & (ds.treatment == 1),
        (ds.source == 1) & (ds.treatment == 0),
        ds.source == 0,
    ]
    for attempt in range(10):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(17, attempt)))
        fold_id = np.zeros(ds.n_rows, dtype=np.int64)
        for mask in cells:
            idx = np.flatnonzero(mask)
            if len(idx) == 0:
                continue
            perm = rng.permutation(idx)
            fold_id[perm] = np.arange(len(perm)) % folds
        ok = all(
            np.sum(cells[0] & (fold_id == k)) >= 1 and np.sum(cells[1] & (fold_id == k)) >= 1
            for k in range(folds)
        )
        if ok and ds.n_ec > 0:
            ec_folds = np.unique(fold_id[cells[2]])
            ok = len(ec_folds) >= min(2, folds)
        if ok:
            return fold_id
    raise FoldDegenerateError(
        f"could not build {folds} folds with both trial arms in every fold "
        f"(trial arms: {int(np.sum(cells[0]))}/{int(np.sum(cells[1]))}, externals: {ds.n_ec})"
    )


ALL_NUISANCES = ("m0", "m1", "pa", "pd", "m0_rct")


def crossfit(
    ds: TrialDataset,
    specs: dict | None = None,
    folds: int = 5,
    seed: int = 0,
    truncation: float = PD_TRUNCATION,
    r_mode: str = "unit",
    use_known_treat_prob: bool = True,
    allow_no_crossfit: bool = False,
    only=None,
) -> NuisanceFits:
    """Cross-fit every nuisance and return out-of-fold predictions.

    The control-outcome regression pools internal and external controls;
    the treated-outcome regression uses treated trial rows; the study
    propensity uses all rows; the treatment propensity uses trial rows or,
    when the dataset carries a design value and ``use_known_treat_prob``
    is set, that constant. Predictions for a row never come from a model
    that saw the row's fold.

    ``only`` restricts fitting to a subset of nuisance names (the rest
    come back as NaN); estimators that need a single nuisance use it to
    avoid redundant fits inside resampling loops.
    """
    if folds < 1:
        raise LearnerError("folds must be >= 1")
    if folds == 1 and not allow_no_crossfit:
        raise LearnerError("folds=1 disables cross-fitting; pass allow_no_crossfit=True to accept")
    if not 0 < truncation < 0.5:
        raise LearnerError("truncation must be in (0, 0.5)")
    if r_mode not in ("unit", "estimate"):
        raise LearnerError(f"unknown r_mode {r_mode!r}")
    wanted = set(ALL_NUISANCES if only is None else only)
    if wanted - set(ALL_NUISANCES):
        raise LearnerError(f"unknown nuisance names {sorted(wanted - set(ALL_NUISANCES))}")

    resolved = resolve_specs(specs)
    n = ds.n_rows
    x, y = ds.covariates, ds.outcome
    a = ds.treatment.astype(np.float64)
    d = ds.source.astype(np.float64)

    fold_id = np.zeros(n, dtype=np.int64) if folds == 1 else _assign_folds(ds, folds, seed)

    m0_hat = np.full(n, np.nan)
    m1_hat = np.full(n, np.nan)
    pa_hat = np.full(n, np.nan)
    pd_hat = np.full(n, np.nan)
    m0_rct_hat = np.full(n, np.nan)

    use_known = use_known_treat_prob and ds.known_treat_prob is not None

    for k in range(folds):
        test = fold_id == k
        train = ~test if folds > 1 else np.ones(n, dtype=bool)

        if "m1" in wanted:
            m1_rows = train & (d == 1) & (a == 1)
            model = fit(resolved["m1"], x[m1_rows], y[m1_rows], seed=_model_seed(seed, k, 1))
            m1_hat[test] = model.predict(x[test])

        if "m0" in wanted:
            m0_rows = train & (a == 0)
            model = fit(resolved["m0"], x[m0_rows], y[m0_rows], seed=_model_seed(seed, k, 0))
            m0_hat[test] = model.predict(x[test])

        if "m0_rct" in wanted:
            m0r_rows = train & (d == 1) & (a == 0)
            model = fit(resolved["m0"], x[m0r_rows], y[m0r_rows], seed=_model_seed(seed, k, 4))
            m0_rct_hat[test] = model.predict(x[test])

        if "pd" in wanted:
            model = fit(resolved["pd"], x[train], d[train], seed=_model_seed(seed, k, 2))
            pd_hat[test] = model.predict(x[test])

        if "pa" in wanted:
            if use_known:
                pa_hat[test] = ds.known_treat_prob
            else:
                pa_rows = train & (d == 1)
                model = fit(resolved["pa"], x[pa_rows], a[pa_rows], seed=_model_seed(seed, k, 3))
                pa_hat[test] = model.predict(x[test])

    if "pd" in wanted:
        pd_hat = np.clip(pd_hat, truncation, 1.0 - truncation)
    if "pa" in wanted:
        pa_hat = np.clip(pa_hat, truncation, 1.0 - truncation)

    notes: list[str] = []
    fits = NuisanceFits(
        m0_hat=m0_hat,
        m1_hat=m1_hat,
        pa_hat=pa_hat,
        pd_hat=pd_hat,
        r_hat=np.ones(n),
        m0_rct_hat=m0_rct_hat,
        fold_id=fold_id,
        q_hat=ds.n_rct / n,
        truncation=truncation,
        warnings=(),
    )
    if r_mode == "estimate":
        r_hat, notes = _variance_ratio(ds, fits, resolved["r"])
        fits = replace(fits, r_hat=r_hat, warnings=tuple(notes))
    return fits


def _variance_ratio(ds: TrialDataset, fits: NuisanceFits, spec: LearnerSpec):
    """Cross-fitted ratio of conditional control-outcome variances.

    Squared out-of-fold control residuals are regressed on X separately
    within internal and external controls; the per-row prediction ratio is
    clipped to a fixed band. With too few control rows on either side the
    ratio falls back to one.
    """
    notes: list[str] = []
    internal = (ds.source == 1) & (ds.treatment == 0)
    external = ds.source == 0
    if int(internal.sum()) < MIN_VARIANCE_ROWS or int(external.sum()) < MIN_VARIANCE_ROWS:
        message = (
            "variance-ratio estimation needs at least "
            f"{MIN_VARIANCE_ROWS} control rows per source; using r=1"
        )
        warnings.warn(message, stacklevel=3)
        return np.ones(ds.n_rows), [message]

    sq_resid = (ds.outcome - fits.m0_hat) ** 2
    x = ds.covariates
    n = ds.n_rows
    var1 = np.empty(n)
    var0 = np.empty(n)
    folds = int(fits.fold_id.max()) + 1
    for k in range(folds):
        test = fits.fold_id == k
        train = ~test if folds > 1 else np.ones(n, dtype=bool)
        rows1 = train & internal
        rows0 = train & external
        if int(rows1.sum()) < 2 or int(rows0.sum()) < 2:
            message = "a fold left too few control rows for the variance regressions; using r=1"
            warnings.warn(message, stacklevel=3)
            return np.ones(n), [message]
        var1[test] = fit(spec, x[rows1], sq_resid[rows1]).predict(x[test])
        var0[test] = fit(spec, x[rows0], sq_resid[rows0]).predict(x[test])
    ratio = np.maximum(var1, 1e-12) / np.maximum(var0, 1e-12)
    return np.clip(ratio, *R_CLIP), notes


def estimate_variance_ratio(
    ds: TrialDataset,
    fits: NuisanceFits,
    spec: LearnerSpec | None = None,
    mode: str = "estimate",
) -> np.ndarray:
    """Return the per-row variance-ratio vector (``mode="unit"`` gives ones)."""
    if mode == "unit":
        return np.ones(ds.n_rows)
    if mode != "estimate":
        raise LearnerError(f"unknown variance-ratio mode {mode!r}")
    ratio, _ = _variance_ratio(ds, fits, spec or LearnerSpec("linear"))
    return ratio
