import numpy as np
import pytest

from hybridec.errors import DegenerateTargetError, FoldDegenerateError, LearnerError, RankError
from hybridec.learners import (
    LearnerSpec,
    crossfit,
    estimate_variance_ratio,
    fit,
    resolve_specs,
)
from hybridec.simulation import DgpConfig, generate

from conftest import make_dataset


class TestFit:
    def test_linear_exact_interpolation(self):
        model = fit(LearnerSpec("linear"), [[0.0], [1.0]], [0.0, 1.0])
        np.testing.assert_allclose(model.predict([[2.0]]), [2.0], atol=1e-12)

    def test_linear_needs_two_rows(self):
        with pytest.raises(LearnerError):
            fit(LearnerSpec("linear"), [[1.0]], [1.0])

    def test_linear_singular_design_raises_rank_error(self):
        x = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])  # second column = 2 * first
        with pytest.raises(RankError):
            fit(LearnerSpec("linear"), x, [1.0, 2.0, 3.0])
        ridge = fit(LearnerSpec("linear", ridge=1e-6), x, [1.0, 2.0, 3.0])
        assert np.all(np.isfinite(ridge.coef))

    def test_logistic_separated_with_ridge_is_finite(self):
        x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        y = np.array([0.0, 0.0, 1.0, 1.0])
        model = fit(LearnerSpec("logistic", ridge=1e-6), x, y)
        assert np.all(np.isfinite(model.coef))
        preds = model.predict(x)
        assert np.all((preds > 0.0) & (preds < 1.0))

    def test_logistic_single_class_degenerate(self):
        with pytest.raises(DegenerateTargetError):
            fit(LearnerSpec("logistic"), [[0.0], [1.0]], [1.0, 1.0])

    def test_logistic_requires_binary_target(self):
        with pytest.raises(LearnerError):
            fit(LearnerSpec("logistic"), [[0.0], [1.0]], [0.2, 0.8])

    def test_logistic_mean_probability_matches_prevalence(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(300, 2))
        y = (x[:, 0] + 0.5 * rng.normal(size=300) > 0.2).astype(float)
        model = fit(LearnerSpec("logistic"), x, y)
        assert model.converged
        assert abs(model.predict(x).mean() - y.mean()) < 1e-6

    def test_forest_beats_holdout_variance(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, size=(500, 1))
        y = x[:, 0] ** 2 + 0.2 * rng.normal(size=500)
        model = fit(LearnerSpec("random_forest", trees=200), x, y, seed=3)
        x_new = rng.uniform(-2, 2, size=(1000, 1))
        y_new = x_new[:, 0] ** 2 + 0.2 * rng.normal(size=1000)
        mse = float(np.mean((model.predict(x_new) - y_new) ** 2))
        assert mse < float(np.var(y_new))

    def test_forest_seed_determinism(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(80, 3))
        y = x[:, 0] + rng.normal(size=80)
        p1 = fit(LearnerSpec("random_forest", trees=25), x, y, seed=9).predict(x)
        p2 = fit(LearnerSpec("random_forest", trees=25), x, y, seed=9).predict(x)
        np.testing.assert_array_equal(p1, p2)
        p3 = fit(LearnerSpec("random_forest", trees=25), x, y, seed=10).predict(x)
        assert not np.array_equal(p1, p3)

    def test_constant_learner_weighted_mean(self):
        model = fit(LearnerSpec("constant"), [[0.0], [0.0], [0.0]], [1.0, 2.0, 6.0], weights=[1, 1, 2])
        np.testing.assert_allclose(model.predict([[0.0]]), [3.75])

    def test_unknown_kind_rejected(self):
        with pytest.raises(LearnerError):
            LearnerSpec("boosting")

    def test_spec_json_round_trip(self):
        spec = LearnerSpec.from_json('{"kind": "random_forest", "trees": 50}')
        assert spec.trees == 50
        assert LearnerSpec.from_json(spec.to_json()) == spec

    def test_resolve_specs_m1_follows_m0(self):
        resolved = resolve_specs({"m0": {"kind": "random_forest", "trees": 30}})
        assert resolved["m1"].kind == "random_forest"
        assert resolved["m1"].trees == 30
        assert resolved["pd"].kind == "logistic"


def small_hybrid(seed=0, n_rct=60, n_ec=30, p=2):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(size=(n_rct, p)), 0.4 + rng.normal(size=(n_ec, p))])
    a = np.zeros(n_rct + n_ec, dtype=int)
    a[rng.permutation(n_rct)[: n_rct * 2 // 3]] = 1
    d = np.zeros(n_rct + n_ec, dtype=int)
    d[:n_rct] = 1
    y = x[:, 0] + a + rng.normal(size=n_rct + n_ec)
    return make_dataset(y, x, a, d)


class TestCrossfit:
    def test_constant_learner_matches_fold_means(self):
        ds = small_hybrid(seed=4)
        fits = crossfit(ds, {"m0": {"kind": "constant"}}, folds=3, seed=1)
        controls = ds.treatment == 0
        for i in range(ds.n_rows):
            train = (fits.fold_id != fits.fold_id[i]) & controls
            np.testing.assert_allclose(fits.m0_hat[i], ds.outcome[train].mean())

    def test_known_treat_prob_is_used(self):
        ds = small_hybrid(seed=5)
        ds = make_dataset(ds.outcome, ds.covariates, ds.treatment, ds.source, known_treat_prob=2 / 3)
        fits = crossfit(ds, folds=3, seed=0)
        np.testing.assert_array_equal(fits.pa_hat, np.full(ds.n_rows, 2 / 3))
        estimated = crossfit(ds, folds=3, seed=0, use_known_treat_prob=False)
        assert not np.allclose(estimated.pa_hat, 2 / 3)

    def test_determinism_bit_for_bit(self):
        ds = small_hybrid(seed=6)
        specs = {"m0": {"kind": "random_forest", "trees": 20}}
        f1 = crossfit(ds, specs, folds=2, seed=42)
        f2 = crossfit(ds, specs, folds=2, seed=42)
        for name in ("m0_hat", "m1_hat", "pa_hat", "pd_hat", "r_hat", "m0_rct_hat", "fold_id"):
            np.testing.assert_array_equal(getattr(f1, name), getattr(f2, name))

    def test_q_hat_exact(self):
        ds = small_hybrid(seed=7, n_rct=60, n_ec=30)
        fits = crossfit(ds, folds=3, seed=0)
        assert fits.q_hat == 60 / 90

    def test_out_of_fold_predictions_ignore_own_outcome(self):
        ds = small_hybrid(seed=8)
        fits = crossfit(ds, folds=3, seed=2)
        row = int(np.flatnonzero(ds.treatment == 0)[0])
        y2 = ds.outcome.copy()
        y2[row] += 13.0
        ds2 = make_dataset(y2, ds.covariates, ds.treatment, ds.source)
        fits2 = crossfit(ds2, folds=3, seed=2)
        np.testing.assert_array_equal(fits.fold_id, fits2.fold_id)
        for name in ("m0_hat", "m1_hat", "pa_hat", "pd_hat"):
            assert getattr(fits, name)[row] == getattr(fits2, name)[row]
        # the perturbed outcome does change other rows' control fit
        assert not np.allclose(fits.m0_hat, fits2.m0_hat)

    def test_truncation_bounds_propensities(self):
        rng = np.random.default_rng(9)
        n_rct, n_ec = 60, 30
        # near-separated sources
        x = np.concatenate([rng.normal(5, 0.3, n_rct), rng.normal(-5, 0.3, n_ec)]).reshape(-1, 1)
        a = np.zeros(90, dtype=int)
        a[rng.permutation(60)[:40]] = 1
        d = np.zeros(90, dtype=int)
        d[:60] = 1
        ds = make_dataset(rng.normal(size=90), x, a, d)
        fits = crossfit(ds, folds=2, seed=0, truncation=0.01)
        assert fits.pd_hat.min() >= 0.01
        assert fits.pd_hat.max() <= 0.99
        from hybridec.estimators import ipdw_weights

        assert np.all(np.isfinite(ipdw_weights(ds, fits)))

    def test_folds_one_needs_explicit_flag(self):
        ds = small_hybrid(seed=10)
        with pytest.raises(LearnerError):
            crossfit(ds, folds=1)
        fits = crossfit(ds, folds=1, allow_no_crossfit=True)
        assert np.all(fits.fold_id == 0)

    def test_degenerate_folds_raise(self):
        # only two treated rows cannot spread over five folds
        y = np.arange(12.0)
        x = np.arange(12.0).reshape(-1, 1)
        a = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])
        d = np.array([1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0])
        ds = make_dataset(y, x, a, d)
        with pytest.raises(FoldDegenerateError):
            crossfit(ds, folds=5, seed=0)

    def test_only_restricts_fitted_nuisances(self):
        ds = small_hybrid(seed=11)
        fits = crossfit(ds, folds=2, seed=0, only=("m0",))
        assert np.all(np.isfinite(fits.m0_hat))
        assert np.all(np.isnan(fits.m1_hat))
        assert np.all(np.isnan(fits.pd_hat))


class TestVarianceRatio:
    def test_unit_mode_is_ones(self):
        ds = small_hybrid(seed=12)
        fits = crossfit(ds, folds=3, seed=0)
        np.testing.assert_array_equal(estimate_variance_ratio(ds, fits, mode="unit"), np.ones(ds.n_rows))

    def _dgp(self, sd_rct, sd_ec, seed):
        config = DgpConfig(
            n_rct=3750,
            n_ec=1250,
            tau_true=1.0,
            covariate_dim=2,
            noise_sd=(sd_rct, sd_ec),
            seed=seed,
        )
        return generate(config)

    def test_homoscedastic_ratio_near_one(self):
        ds = self._dgp(1.0, 1.0, seed=13)
        fits = crossfit(ds, folds=2, seed=0, r_mode="estimate")
        assert 0.8 <= float(fits.r_hat.mean()) <= 1.25

    def test_doubled_trial_noise_ratio_near_four(self):
        ds = self._dgp(2.0, 1.0, seed=14)
        fits = crossfit(ds, folds=2, seed=0, r_mode="estimate")
        assert 2.5 <= float(fits.r_hat.mean()) <= 6.0
        assert fits.r_hat.min() > 0

    def test_too_few_controls_falls_back_to_unit(self):
        rng = np.random.default_rng(15)
        n = 15  # 8 treated, 5 internal controls, 2 externals (< 5 triggers fallback)
        a = np.array([1] * 8 + [0] * 7)
        d = np.array([1] * 13 + [0] * 2)
        ds = make_dataset(rng.normal(size=n), rng.normal(size=(n, 1)), a, d)
        with pytest.warns(UserWarning, match="control rows"):
            fits = crossfit(ds, folds=2, seed=3, r_mode="estimate")
        np.testing.assert_array_equal(fits.r_hat, np.ones(n))
        assert fits.warnings
