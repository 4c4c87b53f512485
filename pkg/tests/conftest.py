import numpy as np
import pytest

from hybridec.data import TrialDataset
from hybridec.learners import NuisanceFits


def make_dataset(
    y, x, a, d, names=None, known_treat_prob=None
) -> TrialDataset:
    return TrialDataset.from_arrays(
        outcome=np.asarray(y, dtype=float),
        covariates=np.asarray(x, dtype=float),
        treatment=np.asarray(a),
        source=np.asarray(d),
        covariate_names=names,
        known_treat_prob=known_treat_prob,
    )


def make_fits(
    ds,
    m0=None,
    m1=None,
    pa=None,
    pd=None,
    r=None,
    m0_rct=None,
    q=None,
) -> NuisanceFits:
    """Hand-built nuisance values for hand-computed estimator checks."""
    n = ds.n_rows

    def vec(value, default):
        if value is None:
            return np.full(n, default, dtype=float)
        value = np.asarray(value, dtype=float)
        return np.full(n, value, dtype=float) if value.ndim == 0 else value.copy()

    m0v = vec(m0, 0.0)
    return NuisanceFits(
        m0_hat=m0v,
        m1_hat=vec(m1, 0.0),
        pa_hat=vec(pa, 0.5),
        pd_hat=vec(pd, 0.5),
        r_hat=vec(r, 1.0),
        m0_rct_hat=m0v.copy() if m0_rct is None else vec(m0_rct, 0.0),
        fold_id=np.zeros(n, dtype=np.int64),
        q_hat=ds.n_rct / n if q is None else q,
    )


@pytest.fixture
def small_trial():
    """12-row hybrid trial with one covariate: 4 treated, 4 internal and 4
    external controls."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=12)
    a = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
    d = np.array([1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    y = 0.8 * x + a * 1.5 + rng.normal(size=12)
    return make_dataset(y, x.reshape(-1, 1), a, d, names=("x1",))


@pytest.fixture
def medium_trial():
    """Informative two-covariate hybrid trial, big enough to cross-fit."""
    rng = np.random.default_rng(21)
    n_rct, n_ec = 90, 45
    x = np.vstack([rng.normal(size=(n_rct, 2)), 0.3 + rng.normal(size=(n_ec, 2))])
    a = np.zeros(n_rct + n_ec, dtype=int)
    a[rng.permutation(n_rct)[:60]] = 1
    d = np.zeros(n_rct + n_ec, dtype=int)
    d[:n_rct] = 1
    y = x[:, 0] - 0.5 * x[:, 1] + 1.2 * a + rng.normal(size=n_rct + n_ec)
    return make_dataset(y, x, a, d, names=("x1", "x2"), known_treat_prob=2 / 3)


FIG2A = {
    "nodes": [
        {"name": "S", "kind": "selection"},
        {"name": "W1", "kind": "covariate"},
        {"name": "W2", "kind": "covariate"},
        {"name": "A", "kind": "treatment"},
        {"name": "Y", "kind": "outcome"},
    ],
    "edges": [["S", "W1"], ["W1", "Y"], ["W2", "Y"], ["A", "Y"]],
}

FIG2B = {
    "nodes": [
        {"name": "S", "kind": "selection"},
        {"name": "W1", "kind": "covariate"},
        {"name": "W2", "kind": "covariate"},
        {"name": "A", "kind": "treatment"},
        {"name": "Y", "kind": "outcome"},
    ],
    "edges": [["S", "W1"], ["S", "W2"], ["W1", "Y"], ["W2", "Y"], ["A", "Y"]],
}

FIG2D = {
    "nodes": [
        {"name": "S", "kind": "selection"},
        {"name": "W1", "kind": "unobserved"},
        {"name": "W2", "kind": "covariate"},
        {"name": "A", "kind": "treatment"},
        {"name": "Y", "kind": "outcome"},
    ],
    "edges": [["S", "W1"], ["W1", "Y"], ["W2", "Y"], ["A", "Y"]],
}
