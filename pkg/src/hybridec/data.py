"""Observed-data container, CSV ingestion, and structural validation.

A hybrid-trial dataset holds one row per patient: outcome Y, covariates X,
binary treatment A (1 = experimental) and binary source D (1 = randomized
trial, 0 = external control). External controls are never treated, the
trial must contain both arms, and covariates must be complete; those
constraints are enforced at construction time.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetValidationError, ParseError, SchemaError

__all__ = [
    "TrialSchema",
    "TrialDataset",
    "Violation",
    "ValidationReport",
    "validate_arrays",
    "load_dataset",
    "write_dataset",
    "split_by_source",
]

_MISSING_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass(frozen=True)
class TrialSchema:
    """Column-name map binding a CSV file to the dataset fields."""

    outcome: str
    treatment: str
    source: str
    covariates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if len(self.covariates) < 1:
            raise SchemaError("schema must declare at least one covariate column")
        names = [self.outcome, self.treatment, self.source, *self.covariates]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema declares a column twice: {names}")

    @classmethod
    def from_json(cls, document: str | dict) -> "TrialSchema":
        doc = json.loads(document) if isinstance(document, str) else document
        try:
            return cls(
                outcome=doc["outcome"],
                treatment=doc["treatment"],
                source=doc["source"],
                covariates=tuple(doc["covariates"]),
            )
        except KeyError as exc:
            raise SchemaError(f"schema document missing key {exc}") from exc

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome,
            "treatment": self.treatment,
            "source": self.source,
            "covariates": list(self.covariates),
        }


@dataclass(frozen=True)
class Violation:
    rule: str
    rows: tuple[int, ...]
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def passed(self) -> bool:
        return len(self.violations) == 0


def validate_arrays(y, x, a, d) -> ValidationReport:
    """Check the structural invariants of the observed data.

    Rules: binary 0/1 coding for A and D, no treated external controls,
    a nonempty trial with both arms, and complete outcome/covariate rows.
    """
    violations = []

    def bad_rows(mask):
        return tuple(int(i) for i in np.flatnonzero(mask))

    for name, col in (("treatment", a), ("source", d)):
        mask = ~np.isin(col, (0, 1))
        if mask.any():
            violations.append(
                Violation(
                    rule=f"binary_{name}",
                    rows=bad_rows(mask),
                    message=f"{name} column must be coded 0/1; offending rows {bad_rows(mask)}",
                )
            )
            # Remaining rules assume 0/1 coding.
            return ValidationReport(tuple(violations))

    treated_ec = (d == 0) & (a == 1)
    if treated_ec.any():
        violations.append(
            Violation(
                rule="external_control_treated",
                rows=bad_rows(treated_ec),
                message=f"external controls must have treatment 0; rows {bad_rows(treated_ec)}",
            )
        )

    n_rct = int(np.sum(d == 1))
    if n_rct == 0:
        violations.append(Violation("rct_empty", (), "no rows with source = 1"))
    else:
        arm1 = int(np.sum((d == 1) & (a == 1)))
        arm0 = n_rct - arm1
        if arm1 == 0 or arm0 == 0:
            violations.append(
                Violation(
                    rule="arm_positivity",
                    rows=(),
                    message=f"trial arms must both be nonempty, got treated={arm1} control={arm0}",
                )
            )

    missing = ~np.isfinite(x).all(axis=1) | ~np.isfinite(y)
    if missing.any():
        violations.append(
            Violation(
                rule="missing_values",
                rows=bad_rows(missing),
                message=f"missing or non-finite outcome/covariate values in rows {bad_rows(missing)}",
            )
        )

    return ValidationReport(tuple(violations))


@dataclass(frozen=True)
class TrialDataset:
    """Immutable observed data: one row per patient, trial rows plus externals.

    Arrays are read-only after construction, so a dataset can be shared
    freely across threads and fits.
    """

    outcome: np.ndarray
    covariates: np.ndarray
    treatment: np.ndarray
    source: np.ndarray
    covariate_names: tuple[str, ...]
    outcome_name: str = "y"
    treatment_name: str = "a"
    source_name: str = "d"
    known_treat_prob: float | None = None

    def __post_init__(self):
        for arr in (self.outcome, self.covariates, self.treatment, self.source):
            arr.flags.writeable = False
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @classmethod
    def from_arrays(
        cls,
        outcome,
        covariates,
        treatment,
        source,
        covariate_names=None,
        known_treat_prob=None,
        outcome_name="y",
        treatment_name="a",
        source_name="d",
        validate=True,
    ) -> "TrialDataset":
        y = np.array(outcome, dtype=np.float64, copy=True)
        x = np.array(covariates, dtype=np.float64, copy=True, ndmin=2)
        if x.shape[0] == 1 and len(y) != 1:
            x = x.reshape(-1, 1)
        a_raw = np.asarray(treatment, dtype=np.float64)
        d_raw = np.asarray(source, dtype=np.float64)
        for name, raw in (("treatment", a_raw), ("source", d_raw)):
            if not np.all(np.isfinite(raw) & (raw == np.floor(raw))):
                raise SchemaError(f"{name} column must hold integers")
        if not (len(y) == len(x) == len(a_raw) == len(d_raw)):
            raise SchemaError(
                f"column lengths differ: y={len(y)} x={len(x)} a={len(a_raw)} d={len(d_raw)}"
            )
        if covariate_names is None:
            covariate_names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(covariate_names) != x.shape[1]:
            raise SchemaError("covariate_names length does not match covariate matrix")
        if known_treat_prob is not None and not 0.0 < known_treat_prob < 1.0:
            raise SchemaError("known_treat_prob must lie strictly inside (0, 1)")
        if validate:
            report = validate_arrays(y, x, a_raw, d_raw)
            if not report.passed:
                raise DatasetValidationError(report)
        a = a_raw.astype(np.int8)
        d = d_raw.astype(np.int8)
        return cls(
            outcome=y,
            covariates=x,
            treatment=a,
            source=d,
            covariate_names=tuple(covariate_names),
            outcome_name=outcome_name,
            treatment_name=treatment_name,
            source_name=source_name,
            known_treat_prob=known_treat_prob,
        )

    @property
    def n_rows(self) -> int:
        return len(self.outcome)

    @property
    def n_rct(self) -> int:
        return int(np.sum(self.source == 1))

    @property
    def n_ec(self) -> int:
        return self.n_rows - self.n_rct

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def validation_report(self) -> ValidationReport:
        return validate_arrays(self.outcome, self.covariates, self.treatment, self.source)


def _parse_cell(token: str, row: int, column: str) -> float:
    stripped = token.strip()
    if stripped.lower() in _MISSING_TOKENS:
        return math.nan
    try:
        return float(stripped)
    except ValueError:
        raise ParseError(
            f"non-numeric value {token!r} at row {row}, column {column!r}",
            row=row,
            column=column,
        ) from None


def _parse_binary_cell(token: str, row: int, column: str) -> int:
    value = _parse_cell(token, row, column)
    if value in (0.0, 1.0):
        return int(value)
    # Defer {1,2}/{true,false}-style codings to validation so all offending
    # rows are reported together; non-integral values are parse errors.
    if math.isnan(value) or value != int(value):
        raise ParseError(
            f"binary column {column!r} has value {token!r} at row {row}",
            row=row,
            column=column,
        )
    return int(value)


def load_dataset(
    path,
    schema: TrialSchema,
    known_treat_prob: float | None = None,
) -> TrialDataset:
    """Read a CSV file into a validated :class:`TrialDataset`.

    The file must be UTF-8 with a header row; rows are preserved in file
    order and covariate columns follow schema declaration order.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        needed = [schema.outcome, schema.treatment, schema.source, *schema.covariates]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"file {path} is missing columns {missing}")
        y, a, d, xs = [], [], [], []
        for row_idx, record in enumerate(reader):
            y.append(_parse_cell(record[schema.outcome], row_idx, schema.outcome))
            a.append(_parse_binary_cell(record[schema.treatment], row_idx, schema.treatment))
            d.append(_parse_binary_cell(record[schema.source], row_idx, schema.source))
            xs.append([_parse_cell(record[c], row_idx, c) for c in schema.covariates])
    if not y:
        raise SchemaError(f"file {path} contains no data rows")
    return TrialDataset.from_arrays(
        outcome=np.asarray(y),
        covariates=np.asarray(xs),
        treatment=np.asarray(a, dtype=np.int8),
        source=np.asarray(d, dtype=np.int8),
        covariate_names=schema.covariates,
        known_treat_prob=known_treat_prob,
        outcome_name=schema.outcome,
        treatment_name=schema.treatment,
        source_name=schema.source,
    )


def write_dataset(ds: TrialDataset, path) -> None:
    """Write a dataset back to CSV so that ``load_dataset`` round-trips it."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [ds.outcome_name, *ds.covariate_names, ds.treatment_name, ds.source_name]
        )
        for i in range(ds.n_rows):
            writer.writerow(
                [repr(float(ds.outcome[i]))]
                + [repr(float(v)) for v in ds.covariates[i]]
                + [int(ds.treatment[i]), int(ds.source[i])]
            )


def _subset(ds: TrialDataset, mask: np.ndarray) -> TrialDataset:
    return TrialDataset.from_arrays(
        outcome=ds.outcome[mask].copy(),
        covariates=ds.covariates[mask].copy(),
        treatment=ds.treatment[mask].copy(),
        source=ds.source[mask].copy(),
        covariate_names=ds.covariate_names,
        known_treat_prob=ds.known_treat_prob,
        outcome_name=ds.outcome_name,
        treatment_name=ds.treatment_name,
        source_name=ds.source_name,
        validate=False,
    )


def split_by_source(ds: TrialDataset) -> tuple[TrialDataset, TrialDataset]:
    """Partition into (trial rows, external-control rows), order preserved.

    The halves are raw partitions: the external part has no trial rows, so
    it intentionally skips whole-dataset validation.
    """
    rct_mask = ds.source == 1
    return _subset(ds, rct_mask), _subset(ds, ~rct_mask)
