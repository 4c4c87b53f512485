"""Treatment-effect estimators for trials augmented with external controls.

All five estimators target the average treatment effect in the trial
population. ``tau_om`` standardizes a pooled control-outcome regression
over the trial covariate distribution; ``tau_ipdw`` reweights controls by
the study propensity; ``tau_aipw`` and ``tau_tmle`` combine both nuisances
and solve the efficient-influence-curve estimating equation; ``tau_rct``
is the trial-only benchmark that ignores externals entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TrialDataset
from .errors import EstimationError, NumericGuardError
from .learners import NuisanceFits, crossfit

__all__ = [
    "TauEstimate",
    "EstimatorConfig",
    "weight_w",
    "ipdw_weights",
    "eif",
    "eif_vector",
    "tau_om",
    "tau_ipdw",
    "tau_aipw",
    "tau_tmle",
    "tau_rct",
    "estimate",
]

METHODS = ("rct", "om", "ipdw", "aipw", "tmle")


@dataclass(frozen=True)
class TauEstimate:
    """Point estimate with its decomposition and optional per-row EIF values."""

    method: str
    tau_hat: float
    mu1_hat: float
    mu0_hat: float
    n_rows: int
    eif_values: np.ndarray | None = None
    targeting_iterations: int | None = None
    targeting_converged: bool = True

    def __post_init__(self):
        if self.eif_values is not None:
            self.eif_values.flags.writeable = False

    def to_json(self) -> dict:
        doc = {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "mu1": self.mu1_hat,
            "mu0": self.mu0_hat,
            "n": self.n_rows,
        }
        if self.eif_values is not None:
            doc["eif_summary"] = {
                "mean": float(np.mean(self.eif_values)),
                "variance": float(np.var(self.eif_values, ddof=1)),
            }
        if self.targeting_iterations is not None:
            doc["targeting_iterations"] = self.targeting_iterations
            doc["targeting_converged"] = self.targeting_converged
        return doc


def weight_w(a, d, pd, pa, r):
    """Control weight in the influence curve.

    ``W(A, D, X) = [D(1-A)pd + (1-D)pd r] / [pd(1-pa) + (1-pd)r]``; zero on
    treated rows, and it splits the control residual between internal and
    external controls according to the study propensity and the variance
    ratio.
    """
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    den = pd * (1.0 - pa) + (1.0 - pd) * r
    if np.any(den <= 0):
        raise NumericGuardError("W denominator non-positive; check truncation and r > 0")
    return (d * (1.0 - a) * pd + (1.0 - d) * pd * r) / den


def ipdw_weights(ds: TrialDataset, fits: NuisanceFits) -> np.ndarray:
    """Study-propensity weights: ``(n/n_rct)(1-A)pd / [(1-pa)pd + (1-pd)]``."""
    if ds.n_rct == 0:
        raise EstimationError("no trial rows; weights undefined")
    a = ds.treatment.astype(np.float64)
    pd_, pa = fits.pd_hat, fits.pa_hat
    den = (1.0 - pa) * pd_ + (1.0 - pd_)
    if np.any(den <= 0):
        raise NumericGuardError("IPDW denominator non-positive; check truncation")
    return (ds.n_rows / ds.n_rct) * (1.0 - a) * pd_ / den


def eif_vector(ds: TrialDataset, fits: NuisanceFits, tau: float) -> np.ndarray:
    """Efficient influence curve evaluated at ``tau`` for every row.

    ``(1/q)[D(m1 - m0 - tau) + (DA/pa)(Y - m1) - W(Y - m0)]``
    """
    if fits.q_hat <= 0:
        raise EstimationError("q_hat must be positive")
    y = ds.outcome
    a = ds.treatment.astype(np.float64)
    d = ds.source.astype(np.float64)
    w = weight_w(a, d, fits.pd_hat, fits.pa_hat, fits.r_hat)
    return (
        d * (fits.m1_hat - fits.m0_hat - tau)
        + d * a / fits.pa_hat * (y - fits.m1_hat)
        - w * (y - fits.m0_hat)
    ) / fits.q_hat


def eif(row: int, ds: TrialDataset, fits: NuisanceFits, tau: float) -> float:
    """Single-row influence-curve value; see :func:`eif_vector`."""
    if fits.q_hat <= 0:
        raise EstimationError("q_hat must be positive")
    y = float(ds.outcome[row])
    a = float(ds.treatment[row])
    d = float(ds.source[row])
    m0 = float(fits.m0_hat[row])
    m1 = float(fits.m1_hat[row])
    pa = float(fits.pa_hat[row])
    w = float(
        weight_w(
            np.array([a]),
            np.array([d]),
            np.array([float(fits.pd_hat[row])]),
            np.array([pa]),
            np.array([float(fits.r_hat[row])]),
        )[0]
    )
    return (d * (m1 - m0 - tau) + d * a / pa * (y - m1) - w * (y - m0)) / fits.q_hat


def _mu1_simple(ds: TrialDataset) -> float:
    treated = ds.treatment == 1
    if not treated.any():
        raise EstimationError("no treated rows; mu1 undefined")
    return float(np.mean(ds.outcome[treated]))


def tau_om(ds: TrialDataset, fits: NuisanceFits) -> TauEstimate:
    """Outcome-model estimator: treated mean minus standardized control fit."""
    d = ds.source == 1
    if not d.any():
        raise EstimationError("no trial rows; mu0 undefined")
    mu1 = _mu1_simple(ds)
    mu0 = float(np.sum(fits.m0_hat[d]) / np.sum(d))
    return TauEstimate("om", mu1 - mu0, mu1, mu0, ds.n_rows)


def tau_ipdw(ds: TrialDataset, fits: NuisanceFits, hajek: bool = False) -> TauEstimate:
    """Weighting estimator; ``hajek`` normalizes by the mean control weight."""
    weights = ipdw_weights(ds, fits)
    if not np.any(weights > 0):
        raise EstimationError("all weights zero; mu0 undefined")
    mu1 = _mu1_simple(ds)
    if hajek:
        mu0 = float(np.sum(weights * ds.outcome) / np.sum(weights))
    else:
        mu0 = float(np.mean(weights * ds.outcome))
    return TauEstimate("ipdw", mu1 - mu0, mu1, mu0, ds.n_rows)


def tau_aipw(ds: TrialDataset, fits: NuisanceFits) -> TauEstimate:
    """Augmented estimator solving the EIF estimating equation in closed form."""
    if ds.n_rct == 0 or fits.q_hat <= 0:
        raise EstimationError("no trial rows")
    y = ds.outcome
    a = ds.treatment.astype(np.float64)
    d = ds.source.astype(np.float64)
    w = weight_w(a, d, fits.pd_hat, fits.pa_hat, fits.r_hat)
    q = fits.q_hat
    mu1 = float(np.mean(d * fits.m1_hat + d * a / fits.pa_hat * (y - fits.m1_hat)) / q)
    mu0 = float(np.mean(d * fits.m0_hat + w * (y - fits.m0_hat)) / q)
    psi = mu1 - mu0
    # Solve mean(eif(tau)) = 0 exactly even if q_hat were not n_rct/n.
    tau = psi * q / float(np.mean(d))
    values = eif_vector(ds, fits, tau)
    return TauEstimate("aipw", tau, mu1, mu0, ds.n_rows, eif_values=values)


def _fluctuate_linear(y, m, h):
    denom = float(np.sum(h * h))
    if denom == 0:
        return m, 0.0
    eps = float(np.sum(h * (y - m)) / denom)
    return m + eps * h, eps


def _fluctuate_logistic(y01, m01, h):
    """Logit-scale offset fit: one-dimensional Newton for the score root."""
    m01 = np.clip(m01, 1e-4, 1 - 1e-4)
    logit = np.log(m01 / (1 - m01))
    eps = 0.0
    for _ in range(50):
        mu = 1.0 / (1.0 + np.exp(-(logit + eps * h)))
        score = float(np.sum(h * (y01 - mu)))
        info = float(np.sum(h * h * mu * (1 - mu)))
        if info <= 0:
            break
        step = score / info
        eps += step
        if abs(step) < 1e-12:
            break
    return 1.0 / (1.0 + np.exp(-(logit + eps * h))), eps


def tau_tmle(
    ds: TrialDataset,
    fits: NuisanceFits,
    tol: float = 1e-10,
    max_iter: int = 20,
    fluctuation: str = "linear",
) -> TauEstimate:
    """Targeted estimator: fluctuates the outcome fits until the empirical
    mean of the influence curve vanishes, then plugs in.

    The treated fit moves along ``H1 = DA/(q pa)`` and the control fit
    along ``H0 = W/q``; with the linear fluctuation one pass of the two
    least-squares offsets zeroes the mean EIF. The logistic variant
    min-max-scales the outcome first and is meant for bounded endpoints.
    """
    if fluctuation not in ("linear", "logistic"):
        raise EstimationError(f"unknown fluctuation {fluctuation!r}")
    if ds.n_rct == 0:
        raise EstimationError("no trial rows")
    y = ds.outcome
    a = ds.treatment.astype(np.float64)
    d = ds.source.astype(np.float64)
    q = fits.q_hat
    w = weight_w(a, d, fits.pd_hat, fits.pa_hat, fits.r_hat)
    h1 = d * a / (q * fits.pa_hat)
    h0 = w / q

    m1 = fits.m1_hat.copy()
    m0 = fits.m0_hat.copy()

    if fluctuation == "logistic":
        y_lo, y_hi = float(np.min(y)), float(np.max(y))
        if y_hi <= y_lo:
            y_hi = y_lo + 1.0
        scale = y_hi - y_lo
        y01 = (y - y_lo) / scale

    def plug_in(m1_cur, m0_cur):
        return float(np.sum(d * (m1_cur - m0_cur)) / np.sum(d))

    def mean_eif(m1_cur, m0_cur, tau_cur):
        phi = d * (m1_cur - m0_cur - tau_cur) + d * a / fits.pa_hat * (y - m1_cur) - w * (y - m0_cur)
        return float(np.mean(phi) / q)

    iterations = 0
    tau = plug_in(m1, m0)
    converged = abs(mean_eif(m1, m0, tau)) < tol
    while not converged and iterations < max_iter:
        if fluctuation == "linear":
            m1, _ = _fluctuate_linear(y, m1, h1)
            m0, _ = _fluctuate_linear(y, m0, h0)
        else:
            m1_01, _ = _fluctuate_logistic(y01, (m1 - y_lo) / scale, h1)
            m0_01, _ = _fluctuate_logistic(y01, (m0 - y_lo) / scale, h0)
            m1 = m1_01 * scale + y_lo
            m0 = m0_01 * scale + y_lo
        iterations += 1
        tau = plug_in(m1, m0)
        converged = abs(mean_eif(m1, m0, tau)) < tol

    targeted = NuisanceFits(
        m0_hat=m0,
        m1_hat=m1,
        pa_hat=fits.pa_hat,
        pd_hat=fits.pd_hat,
        r_hat=fits.r_hat,
        m0_rct_hat=fits.m0_rct_hat,
        fold_id=fits.fold_id,
        q_hat=fits.q_hat,
        truncation=fits.truncation,
        warnings=fits.warnings,
    )
    values = eif_vector(ds, targeted, tau)
    mu1 = float(np.sum(d * m1) / np.sum(d))
    mu0 = float(np.sum(d * m0) / np.sum(d))
    return TauEstimate(
        "tmle",
        tau,
        mu1,
        mu0,
        ds.n_rows,
        eif_values=values,
        targeting_iterations=iterations,
        targeting_converged=converged,
    )


def tau_rct(ds: TrialDataset, fits: NuisanceFits) -> TauEstimate:
    """Trial-only augmented estimator; externals receive zero weight.

    Uses the internal-control outcome fit and the treatment propensity;
    its influence values are embedded in the full sample as ``(D/q) x
    (trial influence)`` so downstream inference is uniform across methods.
    """
    d_mask = ds.source == 1
    a = ds.treatment.astype(np.float64)
    if not ((d_mask & (a == 1)).any() and (d_mask & (a == 0)).any()):
        raise EstimationError("trial must contain both arms")
    y = ds.outcome
    m1 = fits.m1_hat
    m0 = fits.m0_rct_hat
    pa = fits.pa_hat

    aug1 = m1 + a * (y - m1) / pa
    aug0 = m0 + (1.0 - a) * (y - m0) / (1.0 - pa)
    mu1 = float(np.mean(aug1[d_mask]))
    mu0 = float(np.mean(aug0[d_mask]))
    tau = mu1 - mu0
    d = d_mask.astype(np.float64)
    values = d * (aug1 - aug0 - tau) / fits.q_hat
    return TauEstimate("rct", tau, mu1, mu0, ds.n_rows, eif_values=values)


def estimate(ds: TrialDataset, fits: NuisanceFits, method: str, **options) -> TauEstimate:
    """Dispatch by method name; ``options`` go to the specific estimator."""
    if method not in METHODS:
        raise EstimationError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "om":
        return tau_om(ds, fits)
    if method == "ipdw":
        return tau_ipdw(ds, fits, **options)
    if method == "aipw":
        return tau_aipw(ds, fits)
    if method == "tmle":
        return tau_tmle(ds, fits, **options)
    return tau_rct(ds, fits)


@dataclass(frozen=True)
class EstimatorConfig:
    """A reproducible estimation pipeline: learners plus one estimator.

    ``run`` cross-fits the nuisances and evaluates the estimator; the
    bootstrap and the simulation harness re-run the same config on
    resampled or regenerated data.
    """

    method: str = "aipw"
    specs: dict = field(default_factory=dict)
    folds: int = 5
    truncation: float = 0.01
    r_mode: str = "unit"
    use_known_treat_prob: bool = True
    hajek: bool = False
    fluctuation: str = "linear"
    tmle_tol: float = 1e-10
    tmle_max_iter: int = 20

    def __post_init__(self):
        if self.method not in METHODS:
            raise EstimationError(f"unknown method {self.method!r}")

    def needed_nuisances(self) -> tuple[str, ...] | None:
        """Nuisances the method actually reads; None means all of them."""
        if self.method == "om":
            return ("m0",)
        if self.method == "ipdw":
            return ("pa", "pd")
        if self.method == "rct":
            return ("m1", "m0_rct", "pa")
        return None

    def fit_nuisances(self, ds: TrialDataset, seed: int = 0, only="all") -> NuisanceFits:
        return crossfit(
            ds,
            specs=self.specs,
            folds=self.folds,
            seed=seed,
            truncation=self.truncation,
            r_mode=self.r_mode,
            use_known_treat_prob=self.use_known_treat_prob,
            allow_no_crossfit=self.folds == 1,
            only=None if only == "all" else only,
        )

    def estimate(self, ds: TrialDataset, fits: NuisanceFits) -> TauEstimate:
        if self.method == "ipdw":
            return tau_ipdw(ds, fits, hajek=self.hajek)
        if self.method == "tmle":
            return tau_tmle(
                ds,
                fits,
                tol=self.tmle_tol,
                max_iter=self.tmle_max_iter,
                fluctuation=self.fluctuation,
            )
        return estimate(ds, fits, self.method)

    def run(self, ds: TrialDataset, seed: int = 0, lean: bool = False) -> TauEstimate:
        """Cross-fit and estimate; ``lean`` fits only the nuisances the
        method needs (used inside resampling loops)."""
        only = self.needed_nuisances() if lean else "all"
        return self.estimate(ds, self.fit_nuisances(ds, seed=seed, only=only))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "specs": {k: (v.to_json() if hasattr(v, "to_json") else v) for k, v in self.specs.items()},
            "folds": self.folds,
            "truncation": self.truncation,
            "r_mode": self.r_mode,
            "use_known_treat_prob": self.use_known_treat_prob,
            "hajek": self.hajek,
            "fluctuation": self.fluctuation,
        }
