"""Empirical checks on the external-control assumptions.

Three diagnostics: the mean study-propensity difference between trial and
external rows (large values flag over-dependence on modeling), a bucketed
comparison of control outcomes across sources at matched propensity, and a
within-bucket permutation test of the testable implication that the
control-outcome regression does not depend on the data source.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass

import numpy as np

from .data import TrialDataset
from .errors import DiagnosticError, InsufficientOverlapError
from .learners import NuisanceFits

__all__ = [
    "OVERDEPENDENCE_THRESHOLD",
    "Bucket",
    "DiagnosticsReport",
    "propensity_difference",
    "bucketed_outcomes",
    "implication_test",
    "diagnostics_report",
    "buckets_to_csv",
]

OVERDEPENDENCE_THRESHOLD = 0.25
DEFAULT_BUCKET_WIDTH = 0.05
MIN_CI_ARM = 3
_CI_Z = 1.96


def propensity_difference(
    ds: TrialDataset,
    fits: NuisanceFits,
    threshold: float = OVERDEPENDENCE_THRESHOLD,
) -> tuple[float, bool]:
    """Difference of mean estimated study propensities, trial minus external.

    Zero when the populations are exchangeable; values above ``threshold``
    flag that estimation leans heavily on the models.
    """
    if ds.n_rct == 0 or ds.n_ec == 0:
        raise DiagnosticError("propensity difference needs rows from both sources")
    rct = ds.source == 1
    delta = float(np.mean(fits.pd_hat[rct]) - np.mean(fits.pd_hat[~rct]))
    return delta, delta > threshold


def _bucket_index(pd_values: np.ndarray, width: float, n_buckets: int) -> np.ndarray:
    idx = np.floor(pd_values / width).astype(int)
    return np.minimum(idx, n_buckets - 1)  # pd == 1.0 lands in the top bucket


@dataclass(frozen=True)
class Bucket:
    lo: float
    hi: float
    n_internal: int
    n_external: int
    mean_y_internal: float  # nan when the arm is empty
    mean_y_external: float
    ci_internal: tuple[float, float] | None
    ci_external: tuple[float, float] | None

    @property
    def has_empty_arm(self) -> bool:
        return self.n_internal == 0 or self.n_external == 0

    def to_json(self) -> dict:
        return {
            "interval": [self.lo, self.hi],
            "n_internal": self.n_internal,
            "n_external": self.n_external,
            "mean_y_internal": None if np.isnan(self.mean_y_internal) else self.mean_y_internal,
            "mean_y_external": None if np.isnan(self.mean_y_external) else self.mean_y_external,
            "ci_internal": list(self.ci_internal) if self.ci_internal else None,
            "ci_external": list(self.ci_external) if self.ci_external else None,
            "has_empty_arm": self.has_empty_arm,
        }


def _arm_summary(values: np.ndarray):
    n = len(values)
    if n == 0:
        return 0, float("nan"), None
    mean = float(np.mean(values))
    if n < MIN_CI_ARM:
        return n, mean, None
    half = _CI_Z * float(np.std(values, ddof=1)) / np.sqrt(n)
    return n, mean, (mean - half, mean + half)


def bucketed_outcomes(
    ds: TrialDataset, fits: NuisanceFits, width: float = DEFAULT_BUCKET_WIDTH
) -> list[Bucket]:
    """Control outcomes binned by estimated study propensity.

    Buckets of the given width partition [0, 1]; each reports per-source
    counts, means, and normal-approximation confidence intervals (omitted
    for arms with fewer than three controls).
    """
    if not 0 < width <= 0.5:
        raise DiagnosticError(f"bucket width must be in (0, 0.5], got {width}")
    controls = ds.treatment == 0
    n_buckets = int(np.ceil(1.0 / width))
    idx = _bucket_index(fits.pd_hat[controls], width, n_buckets)
    y = ds.outcome[controls]
    internal = ds.source[controls] == 1

    buckets = []
    for b in range(n_buckets):
        in_bucket = idx == b
        n_int, mean_int, ci_int = _arm_summary(y[in_bucket & internal])
        n_ext, mean_ext, ci_ext = _arm_summary(y[in_bucket & ~internal])
        buckets.append(
            Bucket(
                lo=b * width,
                hi=min((b + 1) * width, 1.0),
                n_internal=n_int,
                n_external=n_ext,
                mean_y_internal=mean_int,
                mean_y_external=mean_ext,
                ci_internal=ci_int,
                ci_external=ci_ext,
            )
        )
    return buckets


def _bucket_statistic(y, internal, bucket_ids, mixed_buckets):
    stat = 0.0
    for b in mixed_buckets:
        mask = bucket_ids == b
        diff = float(np.mean(y[mask & internal]) - np.mean(y[mask & ~internal]))
        stat += int(mask.sum()) * diff * diff
    return stat


def implication_test(
    ds: TrialDataset,
    fits: NuisanceFits,
    n_perm: int = 2000,
    seed: int = 0,
    width: float = DEFAULT_BUCKET_WIDTH,
) -> float:
    """Permutation test of equal mean control outcomes across sources.

    Controls are bucketed by estimated study propensity; the statistic sums
    bucket-size-weighted squared mean differences over buckets containing
    both sources, and source labels are permuted within buckets. Returns
    the permutation p-value ``(1 + #{perm >= observed}) / (n_perm + 1)``.
    """
    if ds.n_rct == 0 or ds.n_ec == 0:
        raise DiagnosticError("implication test needs control rows from both sources")
    if n_perm < 1:
        raise DiagnosticError("n_perm must be positive")
    controls = np.flatnonzero(ds.treatment == 0)
    y = ds.outcome[controls]
    internal = ds.source[controls] == 1
    n_buckets = int(np.ceil(1.0 / width))
    bucket_ids = _bucket_index(fits.pd_hat[controls], width, n_buckets)

    mixed = [
        b
        for b in range(n_buckets)
        if internal[bucket_ids == b].any() and (~internal[bucket_ids == b]).any()
    ]
    if len(mixed) < 2:
        raise InsufficientOverlapError(
            f"only {len(mixed)} propensity bucket(s) contain controls from both "
            "sources; widen the buckets or reconsider the external pool"
        )

    observed = _bucket_statistic(y, internal, bucket_ids, mixed)

    # Permuting labels within a bucket only moves the internal-arm sum, so
    # all permutation statistics are accumulated bucket by bucket in one
    # vectorized pass.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(41,)))
    perm_stats = np.zeros(n_perm)
    for b in mixed:
        rows = np.flatnonzero(bucket_ids == b)
        y_b = y[rows]
        labels = np.tile(internal[rows].astype(np.float64), (n_perm, 1))
        labels = rng.permuted(labels, axis=1)
        n1 = float(internal[rows].sum())
        n0 = len(rows) - n1
        s_tot = float(y_b.sum())
        s_int = labels @ y_b
        diff = s_int / n1 - (s_tot - s_int) / n0
        perm_stats += len(rows) * diff**2
    exceed = int(np.sum(perm_stats >= observed))
    return (1 + exceed) / (n_perm + 1)


@dataclass(frozen=True)
class DiagnosticsReport:
    delta_pd: float
    overdependence_flag: bool
    threshold: float
    buckets: tuple[Bucket, ...]
    bucket_width: float
    implication_p_value: float | None
    n_permutations: int
    notes: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "delta_pd": self.delta_pd,
            "overdependence_flag": self.overdependence_flag,
            "threshold": self.threshold,
            "bucket_width": self.bucket_width,
            "buckets": [b.to_json() for b in self.buckets],
            "implication_p_value": self.implication_p_value,
            "n_permutations": self.n_permutations,
            "notes": list(self.notes),
        }


def diagnostics_report(
    ds: TrialDataset,
    fits: NuisanceFits,
    width: float = DEFAULT_BUCKET_WIDTH,
    n_perm: int = 2000,
    seed: int = 0,
    threshold: float = OVERDEPENDENCE_THRESHOLD,
) -> DiagnosticsReport:
    """Run all three diagnostics; the permutation test degrades to a note
    (p-value ``None``) when propensity overlap is insufficient."""
    delta, flag = propensity_difference(ds, fits, threshold=threshold)
    buckets = bucketed_outcomes(ds, fits, width=width)
    notes: tuple[str, ...] = ()
    try:
        p_value = implication_test(ds, fits, n_perm=n_perm, seed=seed, width=width)
    except InsufficientOverlapError as exc:
        p_value = None
        notes = (str(exc),)
    return DiagnosticsReport(
        delta_pd=delta,
        overdependence_flag=flag,
        threshold=threshold,
        buckets=tuple(buckets),
        bucket_width=width,
        implication_p_value=p_value,
        n_permutations=n_perm,
        notes=notes,
    )


def buckets_to_csv(buckets) -> str:
    """Bucket table as CSV text for external plotting."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(
        [
            "lo",
            "hi",
            "n_internal",
            "n_external",
            "mean_y_internal",
            "mean_y_external",
            "ci_low_internal",
            "ci_high_internal",
            "ci_low_external",
            "ci_high_external",
        ]
    )
    for b in buckets:
        writer.writerow(
            [
                b.lo,
                b.hi,
                b.n_internal,
                b.n_external,
                "" if np.isnan(b.mean_y_internal) else repr(b.mean_y_internal),
                "" if np.isnan(b.mean_y_external) else repr(b.mean_y_external),
                "" if b.ci_internal is None else repr(b.ci_internal[0]),
                "" if b.ci_internal is None else repr(b.ci_internal[1]),
                "" if b.ci_external is None else repr(b.ci_external[0]),
                "" if b.ci_external is None else repr(b.ci_external[1]),
            ]
        )
    return out.getvalue()
