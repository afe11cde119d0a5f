"""Effect curves over a swept feature."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from treeprox import (
    ConfigurationError,
    FeatureTable,
    InputDataError,
    fit_bart,
    fit_forest,
    fit_ols,
    pack_fit,
    permutation_importance,
    unpack_fit,
)
from treeprox.effects import (
    EffectCurve,
    apply_overrides,
    default_grid,
    grid_range,
    pick_profile,
    sweep,
)


def table_from(cols, y=None):
    n = len(next(iter(cols.values())))
    arrs = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
    return FeatureTable(np.arange(n), arrs, y, "outcome")


@pytest.fixture(scope="module")
def small_bart():
    rng = np.random.default_rng(7)
    n = 120
    dist = rng.uniform(0.0, 1.0, n)
    age = rng.uniform(18.0, 85.0, n)
    y = 2.0 - 1.5 * dist + 0.01 * age + rng.normal(0.0, 0.3, n)
    train = table_from({"dist_near_1": dist, "age": age}, y)
    fit = fit_bart(train, m=20, iters=300, burn=150, min_leaf=2, seed=3)
    return fit


PROFILE = {"dist_near_1": 0.5, "age": 40.0}


class TestGrids:
    def test_default_grid_is_eleven_exact_tenths(self):
        g = default_grid()
        assert_array_equal(g, np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                        0.6, 0.7, 0.8, 0.9, 1.0]))

    def test_grid_range_inclusive_and_rounded(self):
        assert_array_equal(grid_range(0.0, 0.3, 0.1), [0.0, 0.1, 0.2, 0.3])
        assert grid_range(2.0, 2.0, 0.5).tolist() == [2.0]
        with pytest.raises(ConfigurationError):
            grid_range(0.0, 1.0, 0.0)
        with pytest.raises(ConfigurationError):
            grid_range(1.0, 0.0, 0.1)
        with pytest.raises(ConfigurationError):
            grid_range(0.0, np.inf, 0.1)


class TestSweepValidation:
    def test_baseline_must_sit_on_grid(self, small_bart):
        with pytest.raises(ConfigurationError, match="baseline"):
            sweep(small_bart, PROFILE, "dist_near_1", baseline=0.15)
        curve = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.1 + 1e-12)
        assert curve.baseline == 0.1

    def test_swept_feature_must_be_in_profile(self, small_bart):
        with pytest.raises(ConfigurationError, match="dist_recent_9"):
            sweep(small_bart, PROFILE, "dist_recent_9", baseline=0.1)

    def test_grid_must_be_finite_nonempty(self, small_bart):
        with pytest.raises(ConfigurationError):
            sweep(small_bart, PROFILE, "dist_near_1", np.array([]), baseline=0.0)
        with pytest.raises(ConfigurationError):
            sweep(small_bart, PROFILE, "dist_near_1", np.array([0.0, np.nan]),
                  baseline=0.0)

    def test_profile_values_must_be_finite(self, small_bart):
        bad = {"dist_near_1": 0.5, "age": np.inf}
        with pytest.raises(InputDataError, match="age"):
            sweep(small_bart, bad, "dist_near_1", baseline=0.1)


class TestPosteriorSweep:
    def test_effect_zero_at_baseline_with_zero_width(self, small_bart):
        curve = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.1)
        at = list(curve.grid).index(0.1)
        assert curve.effect_mean[at] == 0.0
        assert curve.effect_lo[at] == 0.0 and curve.effect_hi[at] == 0.0

    def test_bands_are_ordered_and_curve_slopes_down(self, small_bart):
        curve = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.0)
        assert curve.has_bands
        assert np.all(curve.pred_lo <= curve.pred_mean)
        assert np.all(curve.pred_mean <= curve.pred_hi)
        assert np.all(curve.effect_lo <= curve.effect_mean)
        assert np.all(curve.effect_mean <= curve.effect_hi)
        # strong negative signal: far end of the sweep sits clearly below
        assert curve.effect_mean[-1] < -0.5
        assert curve.effect_hi[-1] < 0.0

    def test_paired_width_never_exceeds_sum_of_prediction_widths(self, small_bart):
        curve = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.5)
        at = list(curve.grid).index(0.5)
        pw = curve.pred_hi - curve.pred_lo
        ew = curve.effect_hi - curve.effect_lo
        assert np.all(ew <= pw + pw[at] + 1e-12)

    def test_curve_survives_posterior_serialization(self, small_bart, tmp_path):
        before = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.1)
        meta, arrays = pack_fit(small_bart)
        path = tmp_path / "post.npz"
        np.savez(path, **arrays)
        loaded = unpack_fit(meta, dict(np.load(path)))
        after = sweep(loaded, PROFILE, "dist_near_1", baseline=0.1)
        assert_array_equal(before.pred_mean, after.pred_mean)
        assert_array_equal(before.effect_lo, after.effect_lo)

    def test_fake_draw_model_uses_paired_differences(self):
        # two draws with opposite slopes: pointwise prediction bands are
        # wide, but each draw's own effect is exact, so effect bands show
        # the slope spread only
        grid = grid_range(0.0, 1.0, 0.5)

        class TwoDraws:
            def predict_draws(self, table):
                x = table.column("dist_near_1")
                return np.stack([1.0 + x, 3.0 - x])

        curve = sweep(TwoDraws(), {"dist_near_1": 0.0}, "dist_near_1",
                      grid, baseline=0.0)
        assert_allclose(curve.effect_mean, [0.0, 0.0, 0.0], atol=0.0)
        assert_allclose(curve.effect_lo, [0.0, -0.475, -0.95])
        assert_allclose(curve.effect_hi, [0.0, 0.475, 0.95])


class TestPointModelSweep:
    def test_point_curve_has_no_bands_and_exact_differences(self, rng):
        n = 200
        x = rng.uniform(0.0, 1.0, n)
        z = rng.normal(size=n)
        y = 1.0 + 2.0 * x - 0.5 * z + rng.normal(0.0, 0.1, n)
        train = table_from({"dist_near_1": x, "other": z}, y)
        model = fit_ols(train)
        grid = default_grid()
        curve = sweep(model, {"dist_near_1": 0.0, "other": 0.3},
                      "dist_near_1", grid, baseline=0.1)
        assert not curve.has_bands
        assert curve.pred_lo is None and curve.effect_hi is None
        preds = model.predict(table_from({
            "dist_near_1": grid, "other": np.full(11, 0.3)}))
        assert_array_equal(curve.pred_mean, preds)
        assert_array_equal(curve.effect_mean, preds - preds[1])
        assert curve.effect_mean[1] == 0.0

    def test_forest_point_curve(self, rng):
        n = 150
        x = rng.uniform(0.0, 1.0, n)
        y = (x > 0.5).astype(float) + rng.normal(0.0, 0.05, n)
        train = table_from({"dist_near_1": x}, y)
        model = fit_forest(train, B=30, seed=4)
        curve = sweep(model, {"dist_near_1": 0.0}, "dist_near_1", baseline=0.0)
        assert not curve.has_bands
        assert curve.effect_mean[-1] > 0.5


class TestCurveCsv:
    def test_posterior_csv_layout(self, small_bart, tmp_path):
        curve = sweep(small_bart, PROFILE, "dist_near_1", baseline=0.1)
        path = tmp_path / "curve.csv"
        curve.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "grid,pred_mean,pred_lo,pred_hi,effect_mean,effect_lo,effect_hi"
        assert len(lines) == 12
        first = lines[1].split(",")
        assert float(first[0]) == 0.0
        assert all(cell for cell in first)

    def test_point_csv_leaves_band_cells_empty(self, rng, tmp_path):
        x = rng.uniform(0.0, 1.0, 80)
        train = table_from({"dist_near_1": x}, 2.0 * x)
        curve = sweep(fit_ols(train), {"dist_near_1": 0.0}, "dist_near_1",
                      baseline=0.0)
        path = tmp_path / "curve.csv"
        curve.to_csv(path)
        row = path.read_text().splitlines()[1].split(",")
        assert row[2] == "" and row[3] == "" and row[5] == "" and row[6] == ""
        assert row[1] != "" and row[4] != ""


class TestPickProfile:
    @staticmethod
    def importance_with_local(model, test):
        return permutation_importance(model, test, K=3, seed=0, with_local=True)

    def test_selects_row_where_feature_matters_most(self, rng):
        # outcome depends on dist only below the kink, so local importance
        # concentrates on low-dist rows
        n = 300
        dist = rng.uniform(0.0, 1.0, n)
        y = np.where(dist < 0.3, 3.0 - 6.0 * dist, 1.0) + rng.normal(0.0, 0.05, n)
        train = table_from({"dist_near_1": dist, "junk": rng.normal(size=n)}, y)
        model = fit_forest(train, B=50, seed=1)
        rep = self.importance_with_local(model, train)
        base, other = pick_profile(rep, train, "dist_near_1")
        assert base == other and base is not other
        col = rep.local[:, rep.features.index("dist_near_1")]
        pos = int(np.argmax(col))
        assert base["dist_near_1"] == train.column("dist_near_1")[pos]
        assert col[pos] >= np.quantile(col, 0.95)
        assert base["dist_near_1"] < 0.3  # picked from the active region

    def test_all_zero_column_falls_back_to_lowest_id(self, rng):
        x = rng.uniform(0.0, 1.0, 50)
        flat = table_from({"dist_near_1": x, "other": rng.normal(size=50)},
                          np.full(50, 2.0))

        class Constant:
            def predict(self, table):
                return np.full(table.n, 2.0)

        rep = self.importance_with_local(Constant(), flat)
        assert not np.any(rep.local[:, rep.features.index("other")] != 0.0)
        base, _ = pick_profile(rep, flat, "other")
        at = int(np.argmin(flat.ids))
        assert base["other"] == flat.column("other")[at]

    def test_missing_feature_or_local_matrix_rejected(self, rng):
        x = rng.uniform(size=30)
        t = table_from({"dist_near_1": x}, x * 2.0)
        model = fit_ols(t)
        rep = self.importance_with_local(model, t)
        with pytest.raises(ConfigurationError, match="nope"):
            pick_profile(rep, t, "nope")
        bare = permutation_importance(model, t, K=2, seed=0)
        with pytest.raises(ConfigurationError, match="local"):
            pick_profile(bare, t, "dist_near_1")

    def test_override_changes_only_the_named_block(self, rng):
        n = 60
        u = rng.random(n)
        t = table_from({
            "dist_near_1": rng.uniform(size=n),
            "party=D": (u < 0.4).astype(float),
            "party=R": ((u >= 0.4) & (u < 0.7)).astype(float),
            "age": rng.uniform(20, 80, n),
        }, rng.normal(size=n))
        model = fit_ols(t)
        rep = self.importance_with_local(model, t)
        base, rep_profile = pick_profile(rep, t, "dist_near_1",
                                         overrides={"party": "R"})
        assert rep_profile["party=R"] == 1.0 and rep_profile["party=D"] == 0.0
        same = {k: v for k, v in base.items() if not k.startswith("party=")}
        assert same == {k: v for k, v in rep_profile.items()
                        if not k.startswith("party=")}


class TestApplyOverrides:
    def test_reference_level_zeroes_whole_block(self):
        prof = {"party=D": 1.0, "party=R": 0.0, "age": 30.0}
        out = apply_overrides(prof, {"party": "I"})
        assert out["party=D"] == 0.0 and out["party=R"] == 0.0
        assert out["age"] == 30.0
        assert prof["party=D"] == 1.0  # input untouched

    def test_numeric_override_and_errors(self):
        prof = {"party=D": 1.0, "age": 30.0}
        assert apply_overrides(prof, {"age": 55})["age"] == 55.0
        with pytest.raises(ConfigurationError, match="education"):
            apply_overrides(prof, {"education": "3"})
        with pytest.raises(ConfigurationError, match="height"):
            apply_overrides(prof, {"height": 1.8})
